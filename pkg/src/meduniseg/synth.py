"""Deterministic synthetic phantoms standing in for real multi-modal datasets.

Labels come from the noiseless geometry; Gaussian noise is added to the
rendered image afterwards, so ground truth is exact.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .registry import DatasetSpec, ModalityDescriptor, Sample, TaskDescriptor

SHAPES = ("sphere", "cuboid", "disk", "annulus")
DATASET_FORMAT = "meduniseg-dataset/1"


class PhantomGenerationError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    shape: str
    task: TaskDescriptor
    modality: ModalityDescriptor
    dims: tuple[int, int, int]
    channel_means: tuple[float, ...]
    channel_stds: tuple[float, ...]
    class_offsets: tuple[float, ...]
    noise_std: float = 0.1
    seed: int = 0
    # outer radius as a fraction of half the smallest extent
    radius_range: tuple[float, float] = (0.45, 0.7)
    inner_ratio: float = 0.5
    foreground_bounds: tuple[float, float] = (1e-4, 0.6)

    @property
    def class_count(self) -> int:
        return self.task.class_count

    @property
    def channels(self) -> int:
        return self.modality.channel_count

    def validate(self) -> None:
        if self.shape not in SHAPES:
            raise PhantomGenerationError(f"unknown shape family {self.shape!r}")
        if any(d < 1 for d in self.dims):
            raise PhantomGenerationError(f"dims must be positive, got {self.dims}")
        if (self.dims[0] == 1) != self.modality.is_2d:
            raise PhantomGenerationError(
                f"depth {self.dims[0]} inconsistent with {self.modality.dimensionality} modality"
            )
        if self.shape in ("disk", "annulus") and not self.modality.is_2d:
            raise PhantomGenerationError(f"{self.shape} phantoms are 2D only")
        if self.shape in ("sphere", "cuboid") and self.modality.is_2d:
            raise PhantomGenerationError(f"{self.shape} phantoms are 3D only")
        if len(self.channel_means) != self.channels or len(self.channel_stds) != self.channels:
            raise PhantomGenerationError("channel_means/channel_stds must have one entry per channel")
        if len(self.class_offsets) != self.class_count - 1:
            raise PhantomGenerationError("class_offsets needs one entry per foreground class")
        if self.task.modal_id != self.modality.modal_id:
            raise PhantomGenerationError("task and modality ids disagree")
        if self.shape == "annulus" and self.class_count > 3:
            raise PhantomGenerationError("annulus supports at most 2 foreground classes")
        r_min = self.radius_range[0] * self._extent() / 2
        if self._smallest_radius(r_min) < 1.0:
            raise PhantomGenerationError(
                f"dims {self.dims} too small for {self.class_count - 1} nested {self.shape} classes"
            )

    def _extent(self) -> int:
        d, h, w = self.dims
        return min(h, w) if self.modality.is_2d else min(d, h, w)

    def _smallest_radius(self, r_out: float) -> float:
        if self.shape == "annulus":
            # ring is [0.5r, r], inner disk is 0.35r
            return r_out * (0.35 if self.class_count == 3 else 0.5)
        return r_out * self.inner_ratio ** (self.class_count - 2)


def render_ball(dims, center, radius) -> np.ndarray:
    """Voxels whose centre lies within ``radius`` of ``center`` (voxel units)."""
    z, y, x = np.ogrid[: dims[0], : dims[1], : dims[2]]
    dist2 = (z - center[0]) ** 2 + (y - center[1]) ** 2 + (x - center[2]) ** 2
    return dist2 <= radius**2


def render_box(dims, center, half_extents) -> np.ndarray:
    z, y, x = np.ogrid[: dims[0], : dims[1], : dims[2]]
    return (
        (np.abs(z - center[0]) <= half_extents[0])
        & (np.abs(y - center[1]) <= half_extents[1])
        & (np.abs(x - center[2]) <= half_extents[2])
    )


def _render_label(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    dims = spec.dims
    is_2d = spec.modality.is_2d
    r_out = rng.uniform(*spec.radius_range) * spec._extent() / 2
    lo = np.array([0.0 if is_2d else r_out, r_out, r_out])
    hi = np.array([0.0 if is_2d else dims[0] - 1 - r_out, dims[1] - 1 - r_out, dims[2] - 1 - r_out])
    center = rng.uniform(lo, np.maximum(lo, hi))

    label = np.zeros(dims, dtype=np.uint8)
    if spec.shape == "annulus":
        dist_ok = render_ball(dims, center, r_out)
        label[dist_ok & ~render_ball(dims, center, 0.5 * r_out)] = 1
        if spec.class_count == 3:
            label[render_ball(dims, center, 0.35 * r_out)] = 2
        return label

    aspect = rng.uniform(0.7, 1.0, size=3)
    if is_2d:
        aspect[0] = 0.0
    radius = r_out
    c = center.copy()
    for cls in range(1, spec.class_count):
        if cls > 1:
            inner = radius * spec.inner_ratio
            # keep the inner object inside its parent
            shift = rng.uniform(-1.0, 1.0, size=3) * (radius - inner) * 0.5
            if is_2d:
                shift[0] = 0.0
            c = c + shift
            radius = inner
        if spec.shape == "cuboid":
            half = np.maximum(radius * aspect, 0.5)
            if is_2d:
                half[0] = 0.0
            mask = render_box(dims, c, half)
        else:
            mask = render_ball(dims, c, radius)
        label[mask] = cls
    return label


def render_sample(spec: PhantomSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    label = _render_label(spec, rng)
    counts = np.bincount(label.ravel(), minlength=spec.class_count)
    frac = counts / label.size
    lo, hi = spec.foreground_bounds
    for cls in range(1, spec.class_count):
        if counts[cls] == 0:
            raise PhantomGenerationError(f"sample {index}: class {cls} rendered empty")
        if not lo <= frac[cls] <= hi:
            raise PhantomGenerationError(f"sample {index}: class {cls} fraction {frac[cls]:.4f} outside {spec.foreground_bounds}")

    image = np.empty((spec.channels, *spec.dims), dtype=np.float64)
    offsets = np.concatenate([[0.0], np.asarray(spec.class_offsets, dtype=np.float64)])
    for ch in range(spec.channels):
        base = spec.channel_means[ch] + rng.normal(0.0, spec.channel_stds[ch])
        image[ch] = base + offsets[label]
    image += rng.normal(0.0, spec.noise_std, size=image.shape)
    return Sample(
        image=image.astype(np.float32),
        label=label,
        index=index,
        task_id=spec.task.task_id,
        modal_id=spec.modality.modal_id,
    )


def generate_dataset(spec: PhantomSpec, n_train: int, n_test: int) -> DatasetSpec:
    spec.validate()
    if n_train < 1 or n_test < 1:
        raise PhantomGenerationError("n_train and n_test must be >= 1")
    samples = [render_sample(spec, i) for i in range(n_train + n_test)]
    return DatasetSpec(
        task=spec.task,
        modality=spec.modality,
        train_samples=samples[:n_train],
        test_samples=samples[n_train:],
        seed=spec.seed,
    )


def class_fractions(dataset: DatasetSpec, split: str = "train") -> np.ndarray:
    """Per-class voxel fraction, pooled over a split."""
    samples = dataset.train_samples if split == "train" else dataset.test_samples
    counts = np.zeros(dataset.task.class_count, dtype=np.int64)
    total = 0
    for s in samples:
        counts += np.bincount(s.label.ravel(), minlength=dataset.task.class_count)
        total += s.label.size
    return counts / total


@dataclass
class SampleBatch:
    images: np.ndarray  # [B, C, D, H, W] float32
    labels: np.ndarray  # [B, D, H, W] int64
    task_id: int
    modal_id: int
    indices: np.ndarray


def _crop(sample: Sample, patch, rng: np.random.Generator):
    image, label = sample.image, sample.label
    if patch is None or tuple(patch) == label.shape:
        return image, label
    pad = [max(0, p - s) for p, s in zip(patch, label.shape)]
    if any(pad):
        widths = [(q // 2, q - q // 2) for q in pad]
        image = np.pad(image, [(0, 0), *widths], mode="edge")
        label = np.pad(label, widths)
    starts = [int(rng.integers(0, s - p + 1)) for s, p in zip(label.shape, patch)]
    sl = tuple(slice(a, a + p) for a, p in zip(starts, patch))
    return image[(slice(None), *sl)], label[sl]


def sample_batch(dataset: DatasetSpec, batch_size: int, rng: np.random.Generator, patch=None, split: str = "train") -> SampleBatch:
    """Draw ``batch_size`` samples with replacement; optionally random-crop to ``patch`` (D, H, W)."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    pool = dataset.train_samples if split == "train" else dataset.test_samples
    if not pool:
        raise ValueError(f"dataset {dataset.task.name!r} has no {split} samples")
    idx = rng.integers(0, len(pool), size=batch_size)
    images, labels = [], []
    for i in idx:
        img, lab = _crop(pool[i], patch, rng)
        images.append(img)
        labels.append(lab)
    return SampleBatch(
        images=np.stack(images).astype(np.float32, copy=False),
        labels=np.stack(labels).astype(np.int64),
        task_id=dataset.task.task_id,
        modal_id=dataset.modality.modal_id,
        indices=idx,
    )


# -- on-disk format -----------------------------------------------------------


def write_dataset(dataset: DatasetSpec, directory, phantom: PhantomSpec | None = None) -> Path:
    """Raw little-endian float32 images, uint8 labels, and a JSON manifest."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "labels").mkdir(parents=True, exist_ok=True)

    def entries(samples):
        out = []
        for s in samples:
            img_rel = f"images/{s.index:05d}.f32"
            lab_rel = f"labels/{s.index:05d}.u8"
            s.image.astype("<f4").tofile(directory / img_rel)
            s.label.astype("u1").tofile(directory / lab_rel)
            out.append({"index": s.index, "image": img_rel, "label": lab_rel, "dims": list(s.label.shape)})
        return out

    manifest = {
        "format": DATASET_FORMAT,
        "task": asdict(dataset.task),
        "modality": asdict(dataset.modality),
        "seed": dataset.seed,
        "channels": dataset.modality.channel_count,
        "train": entries(dataset.train_samples),
        "test": entries(dataset.test_samples),
    }
    if phantom is not None:
        manifest["phantom"] = {k: v for k, v in asdict(phantom).items() if k not in ("task", "modality")}
    with open(directory / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def read_dataset(directory) -> DatasetSpec:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest_path}")
    with open(manifest_path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{manifest_path}: unsupported format {manifest.get('format')!r}")
    task = TaskDescriptor(**manifest["task"])
    modality = ModalityDescriptor(**manifest["modality"])
    channels = manifest["channels"]

    def load(entries):
        out = []
        for e in entries:
            dims = tuple(e["dims"])
            image = np.fromfile(directory / e["image"], dtype="<f4").reshape(channels, *dims)
            label = np.fromfile(directory / e["label"], dtype="u1").reshape(dims)
            out.append(Sample(image.astype(np.float32), label, e["index"], task.task_id, modality.modal_id))
        return out

    return DatasetSpec(task, modality, load(manifest["train"]), load(manifest["test"]), seed=manifest["seed"])


def dataset_dirname(task: TaskDescriptor) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in task.name)
    return f"task{task.task_id:03d}_{safe}"


def list_dataset_dirs(root) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / "manifest.json").exists()) if root.exists() else []


def tree_digest(root) -> dict[str, str]:
    """sha256 per file under ``root``; used to compare generated trees."""
    import hashlib

    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = Path(dirpath) / f
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out
