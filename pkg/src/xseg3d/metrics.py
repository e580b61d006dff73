"""Segmentation metrics and the dice training loss.

Masks are boolean arrays; multi-class masks carry the class on axis 0 and may
overlap. Distances are Euclidean in physical units given by ``spacing``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .tensor import Tensor, div, mean, mul, sub, sum as tsum
from .unet import CLASS_NAMES

DSC_WEIGHT = 0.4
HAUSDORFF_WEIGHT = 0.6
CSV_HEADER = ("case", "day", "class", "dsc", "hausdorff_distance", "hausdorff_score", "composite")


def _pair(x, y):
    x = np.asarray(x, dtype=bool)
    y = np.asarray(y, dtype=bool)
    if x.shape != y.shape:
        raise ShapeError(f"mask shapes differ: {x.shape} vs {y.shape}")
    return x, y


def dsc(x, y) -> float:
    """Dice similarity coefficient; two empty masks score 1."""
    x, y = _pair(x, y)
    nx, ny = int(x.sum()), int(y.sum())
    if nx + ny == 0:
        return 1.0
    return 2.0 * int(np.logical_and(x, y).sum()) / (nx + ny)


def soft_dice_terms(probs: Tensor, target, smooth: float):
    """Per (sample, class) soft dice ratios as a tensor of shape (N, C)."""
    t = np.asarray(target, dtype=probs.dtype)
    if t.shape != probs.shape:
        raise ShapeError(f"probs {probs.shape} and target {t.shape} differ")
    if probs.ndim == 4:
        axes = (1, 2, 3)
    else:
        axes = tuple(range(2, probs.ndim))
    inter = tsum(mul(probs, t), axis=axes)
    denom = tsum(probs, axis=axes) + t.sum(axis=axes)
    return div(inter * 2.0 + smooth, denom + smooth)


def soft_dsc(probs: Tensor, target, smooth: float = 1e-5) -> float:
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    return float(mean(soft_dice_terms(probs, target, smooth)).data)


def dice_loss(probs: Tensor, target, smooth: float = 1e-5) -> Tensor:
    """``1 - soft DSC`` averaged over classes and batch; differentiable in ``probs``."""
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    if probs.size and (probs.data.min() < 0 or probs.data.max() > 1):
        raise ValueError("dice_loss expects probabilities in [0, 1]; apply sigmoid first")
    return sub(1.0, mean(soft_dice_terms(probs, target, smooth)))


def volume_diagonal(shape, spacing=None) -> float:
    spacing = (1.0,) * len(shape) if spacing is None else spacing
    return math.sqrt(sum((n * s) ** 2 for n, s in zip(shape, spacing)))


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> float:
    """max over voxels of ``src`` of the distance to the nearest voxel of ``dst``."""
    _, idx = ndimage.distance_transform_edt(~dst, sampling=spacing, return_indices=True)
    pts = np.nonzero(src)
    sq = np.zeros(len(pts[0]), dtype=np.float64)
    for ax, s in enumerate(spacing):
        diff = (pts[ax] - idx[ax][pts]).astype(np.float64) * s
        sq = sq + diff * diff
    return float(np.sqrt(sq).max())


def hausdorff(x, y, spacing=None) -> float:
    """Symmetric Hausdorff distance between two voxel sets.

    Both empty gives 0; exactly one empty gives the volume diagonal.
    """
    x, y = _pair(x, y)
    spacing = tuple(float(s) for s in ((1.0,) * x.ndim if spacing is None else spacing))
    ax, ay = x.any(), y.any()
    if not ax and not ay:
        return 0.0
    if ax != ay:
        return volume_diagonal(x.shape, spacing)
    return max(_directed(x, y, spacing), _directed(y, x, spacing))


def hausdorff_score(x, y, spacing=None) -> float:
    """``1 - hausdorff / diagonal``; higher is better, in [0, 1]."""
    x, y = _pair(x, y)
    return 1.0 - hausdorff(x, y, spacing) / volume_diagonal(x.shape, spacing)


def composite_score(mean_dsc: float, mean_hausdorff_score: float) -> float:
    for name, v in (("dsc", mean_dsc), ("hausdorff score", mean_hausdorff_score)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name} {v} outside [0, 1]")
    return DSC_WEIGHT * mean_dsc + HAUSDORFF_WEIGHT * mean_hausdorff_score


@dataclass(frozen=True)
class ClassMetrics:
    dsc: float
    hausdorff_distance: float
    hausdorff_score: float


@dataclass(frozen=True)
class MetricsReport:
    per_class: dict[str, ClassMetrics]
    mean_dsc: float
    mean_hausdorff_score: float
    composite: float


def evaluate_masks(pred, truth, spacing=None, class_names: Sequence[str] = CLASS_NAMES) -> MetricsReport:
    pred, truth = _pair(pred, truth)
    if pred.shape[0] != len(class_names):
        raise ShapeError(f"expected {len(class_names)} classes, got {pred.shape[0]}", axis="C")
    per = {}
    for c, name in enumerate(class_names):
        d = hausdorff(pred[c], truth[c], spacing)
        per[name] = ClassMetrics(
            dsc(pred[c], truth[c]), d, 1.0 - d / volume_diagonal(pred.shape[1:], spacing)
        )
    md = float(np.mean([m.dsc for m in per.values()]))
    mh = float(np.mean([m.hausdorff_score for m in per.values()]))
    return MetricsReport(per, md, mh, composite_score(md, mh))


def report_rows(case: str, day, report: MetricsReport) -> list[dict]:
    rows = []
    for name, m in report.per_class.items():
        rows.append(
            {
                "case": case,
                "day": day,
                "class": name,
                "dsc": m.dsc,
                "hausdorff_distance": m.hausdorff_distance,
                "hausdorff_score": m.hausdorff_score,
                "composite": composite_score(m.dsc, m.hausdorff_score),
            }
        )
    return rows


def aggregate(reports: Iterable[MetricsReport]) -> dict:
    reports = list(reports)
    md = float(np.mean([r.mean_dsc for r in reports]))
    mh = float(np.mean([r.mean_hausdorff_score for r in reports]))
    hd = float(np.mean([m.hausdorff_distance for r in reports for m in r.per_class.values()]))
    return {
        "case": "ALL",
        "day": "",
        "class": "mean",
        "dsc": md,
        "hausdorff_distance": hd,
        "hausdorff_score": mh,
        "composite": composite_score(md, mh),
    }


def write_metrics_csv(path, items: Iterable[tuple[str, object, MetricsReport]]) -> dict:
    """Write per-class rows for every (case, day, report) plus one aggregate row."""
    items = list(items)
    rows = [row for case, day, rep in items for row in report_rows(case, day, rep)]
    agg = aggregate(rep for _, _, rep in items)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_HEADER)
        w.writeheader()
        for row in rows + [agg]:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return agg
