"""Seeded, splittable random streams.

Streams are Philox counter-based generators keyed by a 64-bit seed plus a
path of labels, so ``Rng(7).split("case3", 2, "epoch", 5)`` yields the same
numbers regardless of how many other streams were drawn before it.
"""
from __future__ import annotations

import zlib

import numpy as np


def _label(v) -> int:
    if isinstance(v, (int, np.integer)):
        return int(v) & 0xFFFFFFFF
    return zlib.crc32(str(v).encode("utf-8"))


class Rng:
    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.generator = np.random.Generator(np.random.Philox(seq))

    def split(self, *labels) -> "Rng":
        return Rng(self.seed, self.key + tuple(_label(v) for v in labels))

    def __repr__(self):
        return f"Rng(seed={self.seed}, key={self.key})"

    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, x):
        return self.generator.permutation(x)
