"""Whole-volume prediction by Gaussian-blended sliding windows, and fold ensembles."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import ConfigError
from ..metrics import soft_dsc
from ..tensor import Tensor, no_record
from ..tensor.ops import _sigmoid
from ..unet import Checkpoint, UNet3D

THRESHOLD = 0.5


def window_starts(n: int, patch: int, overlap: float) -> list[int]:
    """Tile origins along one axis of (padded) length ``n >= patch``."""
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap {overlap} outside [0, 1)")
    step = max(1, int(patch * (1 - overlap)))
    starts = list(range(0, n - patch + 1, step))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def gaussian_window(patch, sigma_scale: float = 0.125) -> np.ndarray:
    """Separable Gaussian importance map with peak 1, in float64."""
    axes = []
    for p in patch:
        c = (p - 1) / 2
        sigma = max(p * sigma_scale, 1e-3)
        axes.append(np.exp(-0.5 * ((np.arange(p) - c) / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w = w / w.max()
    # keep borders from vanishing so every voxel gets finite weight
    return np.maximum(w, 1e-3)


def _as_logits(out) -> np.ndarray:
    return out.data if isinstance(out, Tensor) else np.asarray(out)


def _model_fn(model) -> Callable[[np.ndarray], np.ndarray]:
    if isinstance(model, UNet3D):
        return lambda x: _as_logits(model.forward(x, training=False))
    return lambda x: _as_logits(model(x))


def sliding_window_predict(model, volume: np.ndarray, patch_size, overlap: float = 0.5, batch_size: int = 4) -> np.ndarray:
    """Per-class probabilities for a (C, D, H, W) volume.

    Tiles are zero-padded to cover the volume, passed through ``model`` (a
    :class:`UNet3D` in eval mode or any callable mapping (N, C, d, h, w) arrays
    to logits), squashed with a sigmoid, and blended with a Gaussian window
    whose weights are renormalized per voxel. Blending runs in float64 and
    the result is cast back to the model's output dtype.
    """
    volume = np.asarray(volume)
    if volume.ndim != 4:
        raise ValueError(f"expected (C, D, H, W) volume, got shape {volume.shape}")
    patch = tuple(int(p) for p in patch_size)
    spatial = volume.shape[1:]
    pads = [(max(p - n, 0) // 2, max(p - n, 0) - max(p - n, 0) // 2) for n, p in zip(spatial, patch)]
    padded = np.pad(volume, [(0, 0)] + pads)
    window = gaussian_window(patch)
    corners = list(itertools.product(*[window_starts(n, p, overlap) for n, p in zip(padded.shape[1:], patch)]))
    fn = _model_fn(model)
    acc = None
    wsum = np.zeros(padded.shape[1:], dtype=np.float64)
    out_dtype = None
    with no_record():
        for i in range(0, len(corners), batch_size):
            chunk = corners[i : i + batch_size]
            tiles = np.stack(
                [padded[(slice(None),) + tuple(slice(c, c + p) for c, p in zip(cor, patch))] for cor in chunk]
            )
            logits = fn(tiles)
            out_dtype = logits.dtype
            probs = _sigmoid(logits).astype(np.float64)
            if acc is None:
                acc = np.zeros((probs.shape[1],) + padded.shape[1:], dtype=np.float64)
            for cor, p in zip(chunk, probs):
                sl = tuple(slice(c, c + s) for c, s in zip(cor, patch))
                acc[(slice(None),) + sl] += p * window
                wsum[sl] += window
    out = acc / wsum
    crop = tuple(slice(a, a + n) for (a, _), n in zip(pads, spatial))
    return np.ascontiguousarray(out[(slice(None),) + crop]).astype(out_dtype)


def eval_soft_dsc(model, volumes, patch_size, overlap: float = 0.5) -> float:
    """Mean whole-volume soft DSC in eval mode over ``volumes`` (unaugmented)."""
    scores = []
    for v in volumes:
        probs = sliding_window_predict(model, v.image, patch_size, overlap)
        scores.append(soft_dsc(Tensor(probs[None]), v.mask[None]))
    return float(np.mean(scores)) if scores else float("nan")


@dataclass(frozen=True)
class EnsembleSpec:
    checkpoints: Sequence[Checkpoint]
    threshold: float = THRESHOLD

    def __post_init__(self):
        if not self.checkpoints:
            raise ConfigError("an ensemble needs at least one checkpoint")
        first = self.checkpoints[0].config
        for i, ck in enumerate(self.checkpoints[1:], start=1):
            if ck.config != first:
                raise ConfigError(f"checkpoint {i} has a different UNet config from checkpoint 0")


def ensemble_probabilities(spec: EnsembleSpec, volume: np.ndarray, patch_size, overlap: float = 0.5) -> np.ndarray:
    """Mean of member probability volumes, summed in checkpoint order."""
    total = None
    for ck in spec.checkpoints:
        p = sliding_window_predict(ck.to_model(), volume, patch_size, overlap).astype(np.float64)
        total = p if total is None else total + p
    return total / len(spec.checkpoints)


def threshold(probs: np.ndarray, cutoff: float = THRESHOLD) -> np.ndarray:
    """Multilabel decision; a probability equal to the cutoff counts as positive."""
    return np.asarray(probs) >= cutoff


def ensemble_predict(spec: EnsembleSpec, volume: np.ndarray, patch_size, overlap: float = 0.5) -> np.ndarray:
    return threshold(ensemble_probabilities(spec, volume, patch_size, overlap), spec.threshold)
