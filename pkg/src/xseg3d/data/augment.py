"""Random patch cropping and paired image/mask augmentation.

Spatial transforms move image and mask together (linear interpolation for
the image, nearest for the mask); intensity transforms and coarse dropout
touch the image only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..rng import Rng

PAPER_PATCH = (160, 160, 80)


def pad_to(arr: np.ndarray, size) -> np.ndarray:
    """Zero-pad the trailing three axes symmetrically up to at least ``size``."""
    pads = [(0, 0)] * (arr.ndim - 3)
    for n, s in zip(arr.shape[-3:], size):
        extra = max(s - n, 0)
        pads.append((extra // 2, extra - extra // 2))
    if not any(p for pair in pads for p in pair):
        return arr
    return np.pad(arr, pads)


def sample_patch(image: np.ndarray, mask: np.ndarray, size=PAPER_PATCH, rng: Rng | None = None):
    """Crop congruent (C, *size) patches at a uniformly random valid corner."""
    rng = Rng(0) if rng is None else rng
    image = pad_to(image, size)
    mask = pad_to(mask, size)
    corner = [int(rng.integers(0, n - s + 1)) for n, s in zip(image.shape[1:], size)]
    sl = (slice(None),) + tuple(slice(c, c + s) for c, s in zip(corner, size))
    return np.ascontiguousarray(image[sl]), np.ascontiguousarray(mask[sl])


@dataclass(frozen=True)
class AugmentationConfig:
    p_flip: float = 0.5
    flip_axes: tuple[int, ...] = (0, 1, 2)
    p_affine: float = 0.5
    rotate_range: float = math.radians(15)
    scale_range: float = 0.1
    translate_range: float = 2.0
    p_grid: float = 0.5
    grid_cells: int = 3
    grid_magnitude: float = 1.5
    p_dropout: float = 0.5
    dropout_holes: int = 4
    dropout_size: int = 3
    p_shift: float = 0.5
    shift_range: float = 0.1
    p_scale: float = 0.5
    scale_intensity_range: float = 0.1

    def __post_init__(self):
        for name in ("p_flip", "p_affine", "p_grid", "p_dropout", "p_shift", "p_scale"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(p_flip=0, p_affine=0, p_grid=0, p_dropout=0, p_shift=0, p_scale=0)


def flip(image, mask, axes):
    """Mirror both arrays along the given spatial axes (0=D, 1=H, 2=W)."""
    ax = tuple(a + 1 for a in axes)
    return np.flip(image, ax).copy(), np.flip(mask, ax).copy()


def _rotation(angles):
    a, b, c = angles
    rx = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    ry = np.array([[math.cos(b), 0, math.sin(b)], [0, 1, 0], [-math.sin(b), 0, math.cos(b)]])
    rz = np.array([[math.cos(c), -math.sin(c), 0], [math.sin(c), math.cos(c), 0], [0, 0, 1]])
    return rz @ ry @ rx


def random_affine(image, mask, cfg: AugmentationConfig, rng: Rng):
    shape = np.array(image.shape[1:], dtype=np.float64)
    angles = rng.uniform(-cfg.rotate_range, cfg.rotate_range, size=3)
    scales = 1 + rng.uniform(-cfg.scale_range, cfg.scale_range, size=3)
    shift = rng.uniform(-cfg.translate_range, cfg.translate_range, size=3)
    matrix = _rotation(angles) @ np.diag(1 / scales)
    center = (shape - 1) / 2
    offset = center - matrix @ center + shift

    def warp(vol, order):
        return ndimage.affine_transform(vol, matrix, offset=offset, order=order, mode="constant", cval=0)

    img = np.stack([warp(ch.astype(np.float64), 1) for ch in image]).astype(image.dtype)
    msk = np.stack([warp(ch.astype(np.uint8), 0) for ch in mask]).astype(bool)
    return img, msk


def random_grid_distortion(image, mask, cfg: AugmentationConfig, rng: Rng):
    shape = image.shape[1:]
    ctrl = (cfg.grid_cells + 1,) * 3
    coords = list(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
    for ax in range(3):
        disp = rng.uniform(-cfg.grid_magnitude, cfg.grid_magnitude, size=ctrl)
        zoom = [n / c for n, c in zip(shape, ctrl)]
        field = ndimage.zoom(disp, zoom, order=1, mode="nearest", grid_mode=True)
        coords[ax] = coords[ax] + field[: shape[0], : shape[1], : shape[2]]

    def warp(vol, order):
        return ndimage.map_coordinates(vol, coords, order=order, mode="nearest")

    img = np.stack([warp(ch.astype(np.float64), 1) for ch in image]).astype(image.dtype)
    msk = np.stack([warp(ch.astype(np.uint8), 0) for ch in mask]).astype(bool)
    return img, msk


def coarse_dropout(image, cfg: AugmentationConfig, rng: Rng):
    out = image.copy()
    shape = image.shape[1:]
    for _ in range(cfg.dropout_holes):
        corner = [int(rng.integers(0, max(n - cfg.dropout_size, 0) + 1)) for n in shape]
        sl = tuple(slice(c, c + cfg.dropout_size) for c in corner)
        out[(slice(None),) + sl] = 0
    return out


def augment(image: np.ndarray, mask: np.ndarray, cfg: AugmentationConfig, rng: Rng):
    """Apply each transform independently with its probability."""
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=bool)
    if cfg.p_flip > 0:
        axes = [a for a in cfg.flip_axes if rng.random() < cfg.p_flip]
        if axes:
            image, mask = flip(image, mask, axes)
    if cfg.p_affine > 0 and rng.random() < cfg.p_affine:
        image, mask = random_affine(image, mask, cfg, rng)
    if cfg.p_grid > 0 and rng.random() < cfg.p_grid:
        image, mask = random_grid_distortion(image, mask, cfg, rng)
    if cfg.p_dropout > 0 and rng.random() < cfg.p_dropout:
        image = coarse_dropout(image, cfg, rng)
    if cfg.p_shift > 0 and rng.random() < cfg.p_shift:
        image = image + image.dtype.type(rng.uniform(-cfg.shift_range, cfg.shift_range))
    if cfg.p_scale > 0 and rng.random() < cfg.p_scale:
        image = image * image.dtype.type(1 + rng.uniform(-cfg.scale_intensity_range, cfg.scale_intensity_range))
    image = np.clip(image, 0, 1).astype(image.dtype)
    return np.ascontiguousarray(image), np.ascontiguousarray(mask)
