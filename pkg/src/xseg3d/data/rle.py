"""Run-length codec for 2D slice masks.

Runs are whitespace-separated ``start length`` pairs. Starts are 1-indexed
positions in the flattened slice, row-major by default; ``order="F"`` reads
and writes column-major runs instead.
"""
from __future__ import annotations

import numpy as np

from ..errors import OddTokenCountError, OverlappingRunsError, RLEError, RunOutOfRangeError


def rle_decode(runs: str, height: int, width: int, order: str = "C") -> np.ndarray:
    size = height * width
    flat = np.zeros(size, dtype=bool)
    tokens = runs.split() if isinstance(runs, str) else []
    if not tokens:
        return flat.reshape((height, width), order=order)
    if len(tokens) % 2:
        raise OddTokenCountError(f"run string has {len(tokens)} tokens; expected start/length pairs")
    try:
        vals = np.array([int(t) for t in tokens], dtype=np.int64)
    except ValueError:
        raise RLEError(f"non-integer token in run string {runs[:40]!r}") from None
    starts = vals[0::2] - 1
    lengths = vals[1::2]
    if np.any(starts < 0) or np.any(lengths < 1):
        raise RunOutOfRangeError("run starts must be >= 1 and lengths >= 1")
    ends = starts + lengths
    if np.any(ends > size):
        bad = int(np.argmax(ends > size))
        raise RunOutOfRangeError(
            f"run {starts[bad] + 1} {lengths[bad]} exceeds the {height}x{width} slice ({size} pixels)"
        )
    order_idx = np.argsort(starts, kind="stable")
    s, e = starts[order_idx], ends[order_idx]
    if np.any(s[1:] < e[:-1]):
        raise OverlappingRunsError("runs overlap")
    for a, b in zip(s, e):
        flat[a:b] = True
    return flat.reshape((height, width), order=order)


def rle_encode(mask: np.ndarray, order: str = "C") -> str:
    """Maximal runs in ascending order; an empty mask encodes to ``""``."""
    flat = np.asarray(mask, dtype=bool).ravel(order=order)
    padded = np.concatenate(([False], flat, [False]))
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    starts = edges[0::2]
    lengths = edges[1::2] - starts
    return " ".join(f"{s + 1} {n}" for s, n in zip(starts, lengths))
