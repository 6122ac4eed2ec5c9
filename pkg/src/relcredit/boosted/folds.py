"""Stratified k-fold assignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class FoldPlan:
    k: int
    seed: int
    fold: np.ndarray          # fold id per row

    def train_rows(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.fold != i)

    def val_rows(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.fold == i)

    def __iter__(self):
        for i in range(self.k):
            yield self.train_rows(i), self.val_rows(i)


def stratified_folds(labels, k: int = 5, seed: int = 42) -> FoldPlan:
    """Shuffle each class, then deal rows round-robin; negatives continue where positives stopped."""
    y = np.asarray(labels).astype(np.int64)
    if y.size < k:
        raise ValueError(f"need at least k={k} rows")
    if np.unique(y).size < 2:
        raise ValueError("stratified folds need both classes")
    rng = np.random.default_rng(seed)
    fold = np.empty(y.size, dtype=np.int64)
    start = 0
    for cls in (1, 0):
        rows = np.flatnonzero(y == cls)
        rows = rows[rng.permutation(rows.size)]
        fold[rows] = (start + np.arange(rows.size)) % k
        start += rows.size
    return FoldPlan(k, seed, fold)
