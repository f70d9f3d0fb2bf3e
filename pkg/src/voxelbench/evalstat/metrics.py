"""Overlap metric and descriptive statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError


def dsc(u: np.ndarray, g: np.ndarray) -> float:
    """Dice similarity coefficient of two binary masks; 1.0 when both are empty."""
    u = np.asarray(u, dtype=bool)
    g = np.asarray(g, dtype=bool)
    if u.shape != g.shape:
        raise ShapeError(f"mask shapes differ: {u.shape} vs {g.shape}")
    total = int(u.sum()) + int(g.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(u, g).sum()) / total


@dataclass(frozen=True)
class DescriptiveStats:
    mean: float
    std: float
    median: float
    iqr: float
    n: int
    q1: float
    q3: float


def descriptive(values) -> DescriptiveStats:
    """Mean, sample std, median and IQR (linear-interpolated quantiles).

    ``std`` is NaN for a single value.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("descriptive statistics need at least one value")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    std = float(np.std(v, ddof=1)) if v.size > 1 else float("nan")
    return DescriptiveStats(float(v.mean()), std, float(med), float(q3 - q1), int(v.size), float(q1), float(q3))
