"""Slice records, volume assembly, preprocessing and on-disk layouts.

Disk layout for raw data::

    <images_dir>/<case>_day<day>_slice_<NNNN>.png   16-bit grayscale
    <manifest>.csv                                 id,class,segmentation

where ``id`` is the image file stem and ``segmentation`` is RLE text.
"""
from __future__ import annotations

import csv
import re
import warnings as _warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .. import container
from ..errors import DataError, FormatError
from ..unet import CLASS_NAMES
from .rle import rle_decode, rle_encode

RAW_MAX = 65535
PAPER_SLICE_SIZES = {(234, 234), (266, 266), (276, 276), (310, 360)}
_ID_RE = re.compile(r"^(?P<case>.+)_day(?P<day>\d+)_slice_(?P<slice>\d+)$")


def slice_id(case_id: str, day: int, slice_index: int) -> str:
    return f"{case_id}_day{day}_slice_{slice_index:04d}"


def parse_slice_id(ident: str) -> tuple[str, int, int]:
    m = _ID_RE.match(ident)
    if m is None:
        raise DataError(f"cannot parse slice id {ident!r}")
    return m["case"], int(m["day"]), int(m["slice"])


@dataclass(frozen=True)
class SliceRecord:
    case_id: str
    day: int
    slice_index: int
    image: np.ndarray = field(repr=False)

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def id(self) -> str:
        return slice_id(self.case_id, self.day, self.slice_index)


@dataclass(frozen=True)
class VolumeSample:
    """One scan.

    ``image`` is (1, D, H, W) float32 in [0, 1]; ``mask`` is (3, D, H, W) bool
    in :data:`CLASS_NAMES` order. ``crop_box`` holds (start, stop) per spatial
    axis in the coordinates of ``original_shape``.
    """

    case_id: str
    day: int
    image: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    crop_box: tuple[tuple[int, int], ...] = ()
    original_shape: tuple[int, ...] = ()
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.original_shape:
            object.__setattr__(self, "original_shape", tuple(self.image.shape[1:]))
        if not self.crop_box:
            object.__setattr__(self, "crop_box", tuple((0, n) for n in self.image.shape[1:]))

    @property
    def key(self) -> str:
        return f"{self.case_id}_day{self.day}"

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.image.shape[1:])


def assemble_volume(slices: Iterable[SliceRecord], manifest_rows: Iterable[dict], order: str = "C") -> VolumeSample:
    slices = sorted(slices, key=lambda s: s.slice_index)
    if not slices:
        raise DataError("no slices to assemble")
    scans = {(s.case_id, s.day) for s in slices}
    if len(scans) != 1:
        raise DataError(f"slices belong to several scans: {sorted(scans)}")
    dims = {s.image.shape for s in slices}
    if len(dims) != 1:
        raise DataError(f"mixed slice dimensions within one scan: {sorted(dims)}")
    idx = [s.slice_index for s in slices]
    if len(set(idx)) != len(idx):
        dup = sorted({i for i in idx if idx.count(i) > 1})
        raise DataError(f"duplicate slice index {dup}")
    if idx != list(range(idx[0], idx[0] + len(idx))):
        raise DataError("slice indices are not contiguous")
    case_id, day = next(iter(scans))
    h, w = slices[0].image.shape
    wanted = {s.id for s in slices}
    seg: dict[tuple[str, str], str] = {}
    for row in manifest_rows:
        if row["id"] in wanted:
            seg[(row["id"], row["class"])] = row.get("segmentation") or ""
    image = np.stack([np.asarray(s.image, dtype=np.float32) for s in slices])[None] / np.float32(RAW_MAX)
    mask = np.zeros((len(CLASS_NAMES), len(slices), h, w), dtype=bool)
    for z, s in enumerate(slices):
        for c, name in enumerate(CLASS_NAMES):
            runs = seg.get((s.id, name), "")
            if runs:
                mask[c, z] = rle_decode(runs, h, w, order=order)
    return VolumeSample(case_id, day, image.astype(np.float32), mask)


def volume_to_rows(v: VolumeSample, mask: Optional[np.ndarray] = None, first_slice: int = 0, order: str = "C") -> list[dict]:
    """Manifest rows (one per slice and class) encoding ``mask`` (default: the volume's)."""
    mask = v.mask if mask is None else mask
    rows = []
    for z in range(mask.shape[1]):
        sid = slice_id(v.case_id, v.day, first_slice + z)
        for c, name in enumerate(CLASS_NAMES):
            rows.append({"id": sid, "class": name, "segmentation": rle_encode(mask[c, z], order=order)})
    return rows


def crop_foreground(v: VolumeSample, threshold_fraction: float = 0.05, margin_voxels: int = 2) -> VolumeSample:
    """Crop to the bounding box of voxels brighter than ``threshold_fraction * max``."""
    img = v.image[0]
    if img.size == 0:
        raise DataError("cannot crop an empty image")
    top = float(img.max())
    if top <= 0:
        _warnings.warn(f"{v.key}: all-zero volume left uncropped")
        return replace(v, warnings=v.warnings + ("crop:empty-foreground",))
    fg = img > threshold_fraction * top
    box = []
    for ax in range(3):
        other = tuple(a for a in range(3) if a != ax)
        hits = np.flatnonzero(fg.any(axis=other))
        lo = max(int(hits[0]) - margin_voxels, 0)
        hi = min(int(hits[-1]) + 1 + margin_voxels, img.shape[ax])
        box.append((lo, hi))
    sl = tuple(slice(a, b) for a, b in box)
    base = v.crop_box
    new_box = tuple((b0 + a, b0 + b) for (b0, _), (a, b) in zip(base, box))
    return replace(
        v,
        image=np.ascontiguousarray(v.image[(slice(None),) + sl]),
        mask=np.ascontiguousarray(v.mask[(slice(None),) + sl]),
        crop_box=new_box,
    )


def uncrop(arr: np.ndarray, v: VolumeSample, fill=0) -> np.ndarray:
    """Place a (C, d, h, w) array predicted on ``v`` back into the original grid."""
    out = np.full((arr.shape[0],) + tuple(v.original_shape), fill, dtype=arr.dtype)
    out[(slice(None),) + tuple(slice(a, b) for a, b in v.crop_box)] = arr
    return out


def normalize_intensity(v: VolumeSample, percentile: float = 99.5) -> VolumeSample:
    """Clip at the given intensity percentile, then min-max scale to [0, 1]."""
    img = v.image.astype(np.float64)
    if img.size == 0:
        raise DataError("cannot normalize an empty image")
    hi = np.percentile(img, percentile)
    clipped = np.minimum(img, hi)
    lo = clipped.min()
    span = hi - lo
    if span <= 0:
        _warnings.warn(f"{v.key}: constant volume normalized to zeros")
        return replace(v, image=np.zeros_like(v.image), warnings=v.warnings + ("normalize:constant",))
    out = ((clipped - lo) / span).astype(np.float32)
    return replace(v, image=out)


def preprocess(v: VolumeSample, threshold_fraction=0.05, margin_voxels=2, percentile=99.5) -> VolumeSample:
    return normalize_intensity(crop_foreground(v, threshold_fraction, margin_voxels), percentile)


def annotated_fraction(v: VolumeSample) -> float:
    """Fraction of slices carrying at least one labelled voxel."""
    per_slice = v.mask.any(axis=(0, 2, 3))
    return float(per_slice.mean()) if per_slice.size else 0.0


# ------------------------------------------------------------------------ disk I/O


def write_slice_png(path, image: np.ndarray) -> None:
    arr = np.ascontiguousarray(image, dtype=np.uint16)
    Image.fromarray(arr).save(path, format="PNG")


def read_slice_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    return arr.astype(np.uint16)


def write_manifest(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=("id", "class", "segmentation"))
        w.writeheader()
        for r in rows:
            w.writerow({"id": r["id"], "class": r["class"], "segmentation": r["segmentation"]})


def read_manifest(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"id", "class", "segmentation"} <= set(rows[0]):
        raise DataError(f"{path}: manifest needs columns id, class, segmentation")
    return rows


def read_slice_dir(images_dir) -> dict[tuple[str, int], list[SliceRecord]]:
    scans: dict[tuple[str, int], list[SliceRecord]] = {}
    for p in sorted(Path(images_dir).glob("*.png")):
        case, day, idx = parse_slice_id(p.stem)
        scans.setdefault((case, day), []).append(SliceRecord(case, day, idx, read_slice_png(p)))
    return scans


def ingest(images_dir, manifest_path, order: str = "C") -> list[VolumeSample]:
    """Assemble every scan found in ``images_dir`` (sorted by case, day)."""
    rows = read_manifest(manifest_path)
    scans = read_slice_dir(images_dir)
    return [assemble_volume(scans[k], rows, order=order) for k in sorted(scans)]


def save_volume(v: VolumeSample, path) -> None:
    meta = {
        "kind": "volume",
        "case_id": v.case_id,
        "day": v.day,
        "crop_box": [list(b) for b in v.crop_box],
        "original_shape": list(v.original_shape),
        "spacing": list(v.spacing),
        "warnings": list(v.warnings),
    }
    container.save(path, {"image": v.image, "mask": v.mask}, meta)


def load_volume(path) -> VolumeSample:
    tensors, meta = container.load(path)
    if meta.get("kind") != "volume":
        raise FormatError(f"{Path(path).name} is not a volume container")
    return VolumeSample(
        meta["case_id"],
        int(meta["day"]),
        tensors["image"],
        tensors["mask"].astype(bool),
        tuple(tuple(b) for b in meta["crop_box"]),
        tuple(meta["original_shape"]),
        tuple(meta["spacing"]),
        tuple(meta["warnings"]),
    )
