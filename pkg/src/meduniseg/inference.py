"""Sliding-window inference (uniform averaging) and dataset evaluation."""
from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import ConfigurationError
from .objectives import MetricReport, aggregate, dice_score, weighted_dice_from_images
from .registry import DatasetSpec


def window_starts(size: int, patch: int, overlap: float = 0.5) -> list[int]:
    """Window origins covering [0, size) with step patch * (1 - overlap); the last window is flush."""
    if size <= patch:
        return [0]
    step = max(1, int(np.ceil(patch * (1 - overlap))))
    n = int(np.ceil((size - patch) / step)) + 1
    starts = np.linspace(0, size - patch, n).round().astype(int)
    return sorted(set(starts.tolist()))


def sliding_window_probs(
    predict: Callable[[torch.Tensor], torch.Tensor],
    image: torch.Tensor,
    patch: Sequence[int],
    class_count: int,
    overlap: float = 0.5,
) -> torch.Tensor:
    """Average softmax over overlapping windows.

    ``image`` is [C, D, H, W]; ``predict`` maps a [1, C, *patch] window to
    finest-scale logits [1, Cmax, *patch]. Only channels [0, class_count)
    enter the softmax. Returns [class_count, D, H, W].
    """
    spatial = tuple(image.shape[1:])
    pad = [max(0, p - s) for p, s in zip(patch, spatial)]
    if any(pad):
        pad_arg = []
        for q in reversed(pad):
            pad_arg += [q // 2, q - q // 2]
        image = torch.nn.functional.pad(image[None], pad_arg, mode="replicate")[0]
    padded = tuple(image.shape[1:])
    acc = torch.zeros((class_count, *padded), dtype=torch.float64)
    count = torch.zeros(padded, dtype=torch.float64)
    for origin in itertools.product(*(window_starts(s, p, overlap) for s, p in zip(padded, patch))):
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        logits = predict(image[(slice(None), *sl)][None])[0, :class_count]
        acc[(slice(None), *sl)] += torch.softmax(logits.to(torch.float64), dim=0)
        count[sl] += 1
    probs = acc / count
    crop = tuple(slice(q // 2, q // 2 + s) for q, s in zip(pad, spatial))
    return probs[(slice(None), *crop)]


@torch.no_grad()
def predict_sample(model, image: np.ndarray, task_id: int, modal_id: int, class_count: int, patch, overlap=0.5) -> np.ndarray:
    x = torch.from_numpy(np.ascontiguousarray(image)).to(next(model.parameters()).dtype)
    probs = sliding_window_probs(lambda w: model(w, task_id, modal_id)[0], x, patch, class_count, overlap)
    return probs.argmax(0).numpy().astype(np.uint8)


def patch_for(model, dataset: DatasetSpec) -> tuple[int, int, int]:
    cfg = model.config
    dims = dataset.test_samples[0].label.shape if dataset.test_samples else dataset.train_samples[0].label.shape
    if dataset.modality.is_2d:
        if dims[0] != 1:
            raise ConfigurationError(f"2D dataset {dataset.task.name!r} has depth {dims[0]}")
        return cfg.patch_2d_dims
    if dims[0] == 1:
        raise ConfigurationError(f"3D dataset {dataset.task.name!r} has depth 1")
    return cfg.patch_3d


def evaluate_dataset(
    model,
    dataset: DatasetSpec,
    task_id: int | None = None,
    overlap: float = 0.5,
    split: str = "test",
    predict_fn=None,
) -> tuple[float, list[float], list[np.ndarray]]:
    """Mean Dice (%) over samples; ``task_id`` overrides the routed task (ablation).

    Returns (mean Dice, per-class mean Dice, per-sample per-class Dice).
    The class mask at inference follows the routed task.
    """
    model.eval()
    routed = dataset.task.task_id if task_id is None else task_id
    routed_classes = model.registry.resolve(routed)[0].class_count
    patch = patch_for(model, dataset)
    samples = dataset.test_samples if split == "test" else dataset.train_samples
    per_sample = []
    for s in samples:
        if predict_fn is not None:
            pred = predict_fn(s)
        else:
            pred = predict_sample(model, s.image, routed, dataset.modality.modal_id, routed_classes, patch, overlap)
        per_sample.append(dice_score(pred, s.label, dataset.task.class_count))
    arr = np.stack(per_sample)
    return float(arr.mean(axis=1).mean()), arr.mean(axis=0).tolist(), per_sample


def wrong_task(task_id: int, num_tasks: int) -> int:
    return (task_id + 1) % num_tasks


def evaluate(
    model,
    datasets: Sequence[DatasetSpec],
    wrong_task_id: bool = False,
    overlap: float = 0.5,
    lesion_tags: dict[str, Sequence[bool]] | None = None,
    predict_fns: dict[str, Callable] | None = None,
) -> MetricReport:
    """Per-dataset mean Dice plus 3D / 2D / overall means.

    ``lesion_tags`` maps a dataset name to one flag per test sample (True =
    lesion image); such datasets also get a weighted-Dice column.
    """
    per_dataset, dims, per_class, weighted = {}, {}, {}, {}
    n_tasks = model.registry.num_tasks
    for ds in datasets:
        tid = wrong_task(ds.task.task_id, n_tasks) if wrong_task_id else None
        fn = predict_fns.get(ds.task.name) if predict_fns else None
        mean, classes, samples = evaluate_dataset(model, ds, tid, overlap, predict_fn=fn)
        per_dataset[ds.task.name] = mean
        dims[ds.task.name] = ds.modality.dimensionality
        per_class[ds.task.name] = classes
        if lesion_tags and ds.task.name in lesion_tags:
            tags = list(lesion_tags[ds.task.name])
            scores = [float(s.mean()) for s in samples]
            normal = [d for d, t in zip(scores, tags) if not t]
            lesion = [d for d, t in zip(scores, tags) if t]
            if normal and lesion:
                weighted[ds.task.name] = weighted_dice_from_images(normal, lesion).value
    return aggregate(per_dataset, dims, per_class=per_class, weighted=weighted)
