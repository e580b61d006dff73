"""Synthetic scans with exact analytic organ masks.

Each scan is a dim elliptic body with three brighter structures: an
ellipsoid (stomach), a gently curved tube running along H (large bowel) and
a thinner winding tube running along W (small bowel). Tube centerlines are
cubic polynomials of the running coordinate, so membership is decided with
plain arithmetic and can be re-evaluated exactly voxel by voxel.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..rng import Rng
from .volume import (
    SliceRecord,
    VolumeSample,
    assemble_volume,
    volume_to_rows,
    write_manifest,
    write_slice_png,
)

LEVELS = {"body": 0.12, "small_bowel": 0.35, "large_bowel": 0.6, "stomach": 0.9}
NOISE_SIGMA = 0.02
RAW_SCALE = 20000
MIN_SHAPE = (16, 16, 16)
# tubes thinner than this (large, small bowel) vanish into the noise on tiny volumes
MIN_RADIUS = (1.6, 1.3)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def contains(self, z, y, x):
        return (
            ((z - self.center[0]) / self.radii[0]) ** 2
            + ((y - self.center[1]) / self.radii[1]) ** 2
            + ((x - self.center[2]) / self.radii[2]) ** 2
        ) <= 1.0


@dataclass(frozen=True)
class Tube:
    """Disc of ``radius`` swept along axis 1 (H) or 2 (W).

    For running coordinate t in [start, stop) and s = (t - start) / (stop - start),
    the disc center in the two remaining axes is ``u(s)``, ``v(s)`` with cubic
    coefficients ``u_coef``/``v_coef`` (constant term first). Slices outside
    ``z_range`` are empty.
    """

    axis: int
    start: float
    stop: float
    u_coef: tuple[float, float, float, float]
    v_coef: tuple[float, float, float, float]
    radius: float
    z_range: tuple[int, int]

    @staticmethod
    def _cubic(c, s):
        return c[0] + s * (c[1] + s * (c[2] + s * c[3]))

    def contains(self, z, y, x):
        t = y if self.axis == 1 else x
        other = x if self.axis == 1 else y
        s = (t - self.start) / (self.stop - self.start)
        du = z - self._cubic(self.u_coef, s)
        dv = other - self._cubic(self.v_coef, s)
        inside = (du * du + dv * dv) <= self.radius * self.radius
        return inside & (t >= self.start) & (t < self.stop) & (z >= self.z_range[0]) & (z < self.z_range[1])


@dataclass(frozen=True)
class ScanGeometry:
    shape: tuple[int, int, int]
    body_radii: tuple[float, float]
    stomach: Ellipsoid
    large_bowel: Tube
    small_bowel: Tube

    def body(self, y, x):
        cy, cx = (self.shape[1] - 1) / 2, (self.shape[2] - 1) / 2
        return ((y - cy) / self.body_radii[0]) ** 2 + ((x - cx) / self.body_radii[1]) ** 2 <= 1.0

    def masks(self) -> np.ndarray:
        """(3, D, H, W) boolean masks in large bowel, small bowel, stomach order."""
        z, y, x = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in self.shape], indexing="ij")
        return np.stack(
            [self.large_bowel.contains(z, y, x), self.small_bowel.contains(z, y, x), self.stomach.contains(z, y, x)]
        )


def _random_geometry(shape, rng: Rng) -> ScanGeometry:
    D, H, W = shape
    scale = min(H, W) / 32.0
    u = rng.uniform
    stomach = Ellipsoid(
        (u(0.4, 0.6) * D, u(0.28, 0.38) * H, u(0.28, 0.38) * W),
        (u(0.18, 0.24) * D, u(0.13, 0.17) * H, u(0.13, 0.17) * W),
    )

    def z_range():
        return (int(u(0.0, 0.2) * D), int(np.ceil(u(0.8, 1.0) * D)))

    zc = u(0.4, 0.6) * D
    large = Tube(
        axis=1,
        start=float(int(0.15 * H)),
        stop=float(int(0.85 * H)),
        u_coef=(zc, u(-0.15, 0.15) * D, u(-0.2, 0.2) * D, 0.0),
        v_coef=(u(0.68, 0.74) * W, 0.0, u(-0.12, 0.12) * W, 0.0),
        radius=max(u(2.0, 2.6) * scale, MIN_RADIUS[0]),
        z_range=z_range(),
    )
    zs = u(0.35, 0.65) * D
    small = Tube(
        axis=2,
        start=float(int(0.15 * W)),
        stop=float(int(0.6 * W)),
        u_coef=(zs, u(-0.3, 0.3) * D, 0.0, 0.0),
        v_coef=(u(0.66, 0.72) * H, u(-0.1, 0.1) * H, u(-0.15, 0.15) * H, 0.0),
        radius=max(u(1.9, 2.3) * scale, MIN_RADIUS[1]),
        z_range=z_range(),
    )
    return ScanGeometry(tuple(shape), (0.46 * H, 0.46 * W), stomach, large, small)


def render(geom: ScanGeometry, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Raw uint16 (D, H, W) intensities and the (3, D, H, W) masks."""
    D, H, W = geom.shape
    masks = geom.masks()
    y, x = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    body = np.broadcast_to(geom.body(y, x), geom.shape)
    img = np.where(body, LEVELS["body"], 0.0)
    for name, m in zip(("large_bowel", "small_bowel", "stomach"), masks):
        img = np.where(m, np.maximum(img, LEVELS[name]), img)
    noise = rng.normal(0.0, NOISE_SIGMA, size=geom.shape)
    img = np.where(body, img + noise, img)
    raw = np.round(np.clip(img, 0, 1) * RAW_SCALE).astype(np.uint16)
    return raw, masks


@dataclass
class SyntheticDataset:
    slices: dict[str, list[SliceRecord]]
    manifest: list[dict]
    volumes: list[VolumeSample]
    geometry: dict[str, ScanGeometry]

    def write(self, out_dir) -> tuple[Path, Path]:
        """Emit ``images/*.png`` plus ``train.csv`` under ``out_dir``."""
        out = Path(out_dir)
        images = out / "images"
        images.mkdir(parents=True, exist_ok=True)
        for key in sorted(self.slices):
            for rec in self.slices[key]:
                write_slice_png(images / f"{rec.id}.png", rec.image)
        manifest = out / "train.csv"
        write_manifest(manifest, self.manifest)
        return images, manifest


def _days_for(n_cases, days_per_case, n_volumes, rng: Rng) -> list[int]:
    lo, hi = days_per_case
    if n_volumes is None:
        return [int(rng.integers(lo, hi + 1)) for _ in range(n_cases)]
    counts = []
    total = 0
    while total < n_volumes:
        c = min(int(rng.integers(lo, hi + 1)), n_volumes - total)
        counts.append(c)
        total += c
    return counts


def generate_synthetic(
    n_cases: int = 8,
    shape=(24, 32, 32),
    rng: Rng | None = None,
    days_per_case=(1, 1),
    n_volumes: int | None = None,
) -> SyntheticDataset:
    """Deterministic synthetic dataset; ``n_volumes`` overrides ``n_cases``."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < m for s, m in zip(shape, MIN_SHAPE)):
        raise ValueError(f"synthetic volume shape must be at least {MIN_SHAPE}, got {shape}")
    if n_volumes is None and n_cases < 1:
        raise ValueError("need at least one case")
    rng = Rng(0) if rng is None else rng
    counts = _days_for(n_cases, days_per_case, n_volumes, rng.split("roster"))
    slices, manifest, volumes, geometry = {}, [], [], {}
    for i, n_days in enumerate(counts):
        case_id = f"case{101 + i}"
        day_rng = rng.split("days", case_id)
        days = sorted(int(d) for d in day_rng.permutation(np.arange(1, 41))[:n_days])
        for day in days:
            srng = rng.split("scan", case_id, day)
            geom = _random_geometry(shape, srng.split("geometry"))
            raw, masks = render(geom, srng.split("noise"))
            recs = [SliceRecord(case_id, day, z + 1, raw[z]) for z in range(shape[0])]
            probe = VolumeSample(case_id, day, np.zeros((1,) + shape, np.float32), masks)
            rows = volume_to_rows(probe, first_slice=1)
            key = probe.key
            slices[key] = recs
            manifest.extend(rows)
            geometry[key] = geom
            volumes.append(assemble_volume(recs, rows))
    return SyntheticDataset(slices, manifest, volumes, geometry)
