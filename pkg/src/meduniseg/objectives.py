"""Deep-supervised Dice + CE with task-aware class masking, and Dice metrics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError

DICE_SMOOTH = 1e-5


class LabelError(ValueError):
    pass


def scale_weights(n_scales: int) -> list[float]:
    raw = [2.0**-s for s in range(n_scales)]
    total = sum(raw)
    return [r / total for r in raw]


@dataclass
class LossReport:
    total: torch.Tensor
    dice: list[float]
    ce: list[float]
    weights: list[float]

    @property
    def value(self) -> float:
        return float(self.total.detach())


def downsample_labels(labels: torch.Tensor, size) -> torch.Tensor:
    if tuple(labels.shape[1:]) == tuple(size):
        return labels
    out = F.interpolate(labels[:, None].to(torch.float32), size=tuple(size), mode="nearest")
    return out[:, 0].to(torch.long)


def soft_dice_loss(logits: torch.Tensor, labels: torch.Tensor, class_count: int) -> torch.Tensor:
    """1 - mean foreground soft Dice; intersections and sums pooled over the batch."""
    probs = torch.softmax(logits[:, :class_count], dim=1)
    onehot = F.one_hot(labels, class_count).movedim(-1, 1).to(probs.dtype)
    reduce = [0] + list(range(2, probs.dim()))
    inter = (probs * onehot).sum(reduce)
    denom = probs.sum(reduce) + onehot.sum(reduce)
    dice = (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return 1 - dice[1:].mean()


def masked_loss(logits, labels: torch.Tensor, class_count: int, weights: Sequence[float] | None = None) -> LossReport:
    """Dice + CE over logit channels [0, class_count) at every supervised scale.

    ``logits`` is a tensor or a finest-first list of tensors shaped
    [B, Cmax, D, H, W]; ``labels`` is [B, D, H, W] at the finest scale.
    Channels >= class_count are sliced away, so they get no gradient.
    """
    if isinstance(logits, torch.Tensor):
        logits = [logits]
    cmax = logits[0].shape[1]
    if not 2 <= class_count <= cmax:
        raise LabelError(f"class_count {class_count} outside [2, {cmax}]")
    if labels.min() < 0 or labels.max() >= class_count:
        raise LabelError(f"labels must lie in [0, {class_count}), found range [{int(labels.min())}, {int(labels.max())}]")
    if weights is None:
        weights = scale_weights(len(logits))
    if len(weights) != len(logits):
        raise ValueError(f"{len(weights)} weights for {len(logits)} scales")
    total = 0.0
    dices, ces = [], []
    for w, lg in zip(weights, logits):
        lab = downsample_labels(labels, lg.shape[2:])
        d = soft_dice_loss(lg, lab, class_count)
        c = F.cross_entropy(lg[:, :class_count], lab)
        total = total + w * (d + c)
        dices.append(float(d.detach()))
        ces.append(float(c.detach()))
    return LossReport(total=total, dice=dices, ce=ces, weights=list(weights))


# -- metrics ------------------------------------------------------------------


def dice_score(pred: np.ndarray, true: np.ndarray, class_count: int) -> np.ndarray:
    """Per-foreground-class Dice in percent; both maps empty counts as 100."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {true.shape}")
    out = np.empty(class_count - 1, dtype=np.float64)
    for c in range(1, class_count):
        p = pred == c
        g = true == c
        denom = p.sum() + g.sum()
        out[c - 1] = 100.0 if denom == 0 else 200.0 * np.logical_and(p, g).sum() / denom
    return out


@dataclass(frozen=True)
class WeightedDice:
    value: float
    w0: float
    w1: float


def inverse_frequency_weights(n0: int, n1: int) -> tuple[float, float]:
    if n0 < 1 or n1 < 1:
        raise ValueError(f"both subsets need at least one image, got n0={n0}, n1={n1}")
    inv0, inv1 = 1.0 / n0, 1.0 / n1
    return inv0 / (inv0 + inv1), inv1 / (inv0 + inv1)


def weighted_dice(d0: float, d1: float, n0: int, n1: int) -> WeightedDice:
    """Combine normal-set mean Dice ``d0`` and lesion-set mean Dice ``d1``."""
    w0, w1 = inverse_frequency_weights(n0, n1)
    return WeightedDice(w0 * d0 + w1 * d1, w0, w1)


def weighted_dice_from_images(normal: Sequence[float], lesion: Sequence[float]) -> WeightedDice:
    return weighted_dice(float(np.mean(normal)), float(np.mean(lesion)), len(normal), len(lesion))


@dataclass
class MetricReport:
    per_dataset: dict[str, float]
    dimensionality: dict[str, str]
    mean_3d: float | None
    mean_2d: float | None
    mean: float | None
    per_class: dict[str, list[float]] = field(default_factory=dict)
    weighted: dict[str, float] = field(default_factory=dict)
    omitted_groups: list[str] = field(default_factory=list)

    def to_csv(self, method: str = "MedUniSeg") -> str:
        names = [n for n in self.per_dataset if self.dimensionality[n] == "3D"]
        names += [n for n in self.per_dataset if self.dimensionality[n] == "2D"]
        wnames = [n for n in names if n in self.weighted]
        header = ["Method", *names, *[f"{n} (WDice)" for n in wnames], "3D Mean", "2D Mean", "Mean"]

        def fmt(v):
            return "" if v is None else repr(float(v))

        row = [method, *[fmt(self.per_dataset[n]) for n in names], *[fmt(self.weighted[n]) for n in wnames]]
        row += [fmt(self.mean_3d), fmt(self.mean_2d), fmt(self.mean)]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerow(row)
        return buf.getvalue()

    @staticmethod
    def read_csv(text: str) -> dict[str, float | None]:
        header, row = list(csv.reader(io.StringIO(text)))[:2]
        return {h: (float(v) if v else None) for h, v in zip(header[1:], row[1:])}


def aggregate(per_dataset: Mapping[str, float], dimensionality: Mapping[str, str], **extra) -> MetricReport:
    """Unweighted means over 3D datasets, 2D datasets, and all datasets.

    The overall mean averages datasets, not the two group means. An empty
    group is reported as None and listed in ``omitted_groups``.
    """
    for name in per_dataset:
        if dimensionality.get(name) not in ("2D", "3D"):
            raise ValueError(f"dataset {name!r} lacks a 2D/3D tag")

    def mean(vals):
        return math.fsum(vals) / len(vals) if vals else None

    v3 = [per_dataset[n] for n in per_dataset if dimensionality[n] == "3D"]
    v2 = [per_dataset[n] for n in per_dataset if dimensionality[n] == "2D"]
    omitted = [g for g, vals in (("3D", v3), ("2D", v2)) if not vals]
    return MetricReport(
        per_dataset=dict(per_dataset),
        dimensionality={n: dimensionality[n] for n in per_dataset},
        mean_3d=mean(v3),
        mean_2d=mean(v2),
        mean=mean(list(per_dataset.values())),
        omitted_groups=omitted,
        **extra,
    )
