"""Isotonic calibration by pool-adjacent-violators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def pav(y, w=None) -> np.ndarray:
    """Weighted least-squares non-decreasing fit to ``y`` in the given order."""
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if w is None else np.asarray(w, dtype=np.float64)
    means, weights, sizes = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        weights.append(wi)
        sizes.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, s2 = means.pop(), weights.pop(), sizes.pop()
            m1, w1 = means[-1], weights[-1]
            weights[-1] = w1 + w2
            means[-1] = (m1 * w1 + m2 * w2) / (w1 + w2)
            sizes[-1] += s2
    return np.repeat(means, sizes)


@dataclass
class IsotonicMap:
    """Right-continuous step map: a score takes the fitted value of the largest knot <= it."""
    knots: np.ndarray
    values: np.ndarray

    def __call__(self, scores) -> np.ndarray:
        s = np.asarray(scores, dtype=np.float64)
        idx = np.searchsorted(self.knots, s, side="right") - 1
        return self.values[np.clip(idx, 0, self.knots.size - 1)]

    def to_dict(self) -> dict:
        return {"knots": self.knots.tolist(), "values": self.values.tolist()}


def calibrate_isotonic(scores, labels) -> IsotonicMap:
    """Fit on out-of-fold scores; tied scores are pooled before PAV."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    knots, inv, counts = np.unique(s, return_inverse=True, return_counts=True)
    if knots.size < 2:
        raise ValueError("isotonic calibration needs at least 2 distinct scores")
    means = np.bincount(inv, weights=y) / counts
    return IsotonicMap(knots, pav(means, counts))
