"""Stratified group k-fold assignment of cases.

All scans of a case land in the same fold. Cases are stratified by the
quantile bin of their annotated-slice fraction; within each stratum the
greedy assignment keeps per-fold case counts within one of each other,
preferring the fold with fewer scans so far.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from ..rng import Rng


class ScanInfo(NamedTuple):
    case_id: str
    day: int
    annotated_fraction: float


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: dict[str, int]
    stratum_of: dict[str, int]
    scans_of: dict[str, int]

    def val_cases(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.fold_of.items() if f == fold)

    def train_cases(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.fold_of.items() if f != fold)

    def fold_scan_counts(self) -> list[int]:
        counts = [0] * self.k
        for c, f in self.fold_of.items():
            counts[f] += self.scans_of[c]
        return counts

    def stratum_histogram(self) -> np.ndarray:
        """(strata, folds) array of case counts."""
        n_strata = max(self.stratum_of.values()) + 1
        hist = np.zeros((n_strata, self.k), dtype=int)
        for c, f in self.fold_of.items():
            hist[self.stratum_of[c], f] += 1
        return hist

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["case_id", "fold"])
            for c in sorted(self.fold_of):
                w.writerow([c, self.fold_of[c]])

    @classmethod
    def from_csv(cls, path, k: int | None = None) -> "FoldAssignment":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        fold_of = {r["case_id"]: int(r["fold"]) for r in rows}
        k = k if k is not None else max(fold_of.values()) + 1
        return cls(k, fold_of, {c: 0 for c in fold_of}, {c: 1 for c in fold_of})


def quantile_strata(values: np.ndarray, n_bins: int) -> np.ndarray:
    if n_bins <= 1 or len(values) == 0:
        return np.zeros(len(values), dtype=int)
    edges = np.quantile(values, np.linspace(0, 1, n_bins + 1)[1:-1])
    raw = np.searchsorted(edges, values, side="right")
    _, dense = np.unique(raw, return_inverse=True)
    return dense.astype(int)


def stratified_group_kfold(scans: Iterable[ScanInfo], k: int = 5, rng: Rng | None = None, n_bins: int = 4) -> FoldAssignment:
    rng = Rng(0) if rng is None else rng
    per_case: dict[str, list[float]] = {}
    for s in scans:
        per_case.setdefault(s.case_id, []).append(float(s.annotated_fraction))
    cases = sorted(per_case)
    if len(cases) < k:
        raise ValueError(f"need at least k={k} distinct cases, got {len(cases)}")
    fracs = np.array([np.mean(per_case[c]) for c in cases])
    bins = min(n_bins, max(len(cases) // k, 1))
    strata = quantile_strata(fracs, bins)
    stratum_of = {c: int(s) for c, s in zip(cases, strata)}
    scans_of = {c: len(per_case[c]) for c in cases}

    perm = rng.permutation(len(cases))
    order = sorted((cases[i] for i in perm), key=lambda c: -scans_of[c])
    n_strata = int(strata.max()) + 1
    stratum_count = np.zeros((n_strata, k), dtype=int)
    fold_scans = np.zeros(k, dtype=int)
    fold_of: dict[str, int] = {}
    for c in order:
        s = stratum_of[c]
        row = stratum_count[s]
        candidates = np.flatnonzero(row == row.min())
        best = min(candidates, key=lambda f: (fold_scans[f], f))
        fold_of[c] = int(best)
        stratum_count[s, best] += 1
        fold_scans[best] += scans_of[c]
    return FoldAssignment(k, fold_of, stratum_of, scans_of)
