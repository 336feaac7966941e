"""Median split, two-sample tests and the 3-sigma rule."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .special import f_sf, kolmogorov_sf, student_t_sf2

MIN_SIDE = 3
MIN_SIGMA_POPULATION = 4


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    performed: bool = True

    __test__ = False  # not a pytest class


_SKIPPED = TestResult(float("nan"), 1.0, performed=False)


@dataclass(frozen=True)
class SplitLists:
    """Absolute distances to the median, above (``l1``) and below (``l2``)."""

    median: float
    l1: np.ndarray
    l2: np.ndarray
    above_idx: tuple[int, ...]
    below_idx: tuple[int, ...]
    at_median_idx: tuple[int, ...]


def lower_median(values: Sequence[float]) -> float:
    """Order statistic at position (n - 1) // 2; no interpolation."""
    arr = np.sort(np.asarray(values, dtype=np.float64))
    if arr.size == 0:
        raise ValueError("median of empty sequence")
    return float(arr[(arr.size - 1) // 2])


def median_split(values: Sequence[float]) -> SplitLists:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("median_split needs at least one value")
    med = lower_median(arr)
    above = np.flatnonzero(arr > med)
    below = np.flatnonzero(arr < med)
    at = np.flatnonzero(arr == med)
    return SplitLists(med, arr[above] - med, med - arr[below],
                      tuple(above.tolist()), tuple(below.tolist()), tuple(at.tolist()))


def _pair(l1, l2):
    a = np.asarray(l1, dtype=np.float64)
    b = np.asarray(l2, dtype=np.float64)
    return a, b, (a.size >= MIN_SIDE and b.size >= MIN_SIDE)


def t_test(l1, l2) -> TestResult:
    """Two-sided Student t-test with pooled variance."""
    a, b, ok = _pair(l1, l2)
    if not ok:
        return _SKIPPED
    n1, n2 = a.size, b.size
    diff = a.mean() - b.mean()
    pooled = ((n1 - 1) * a.var(ddof=1) + (n2 - 1) * b.var(ddof=1)) / (n1 + n2 - 2)
    if pooled == 0.0:
        if diff == 0.0:
            return _SKIPPED
        return TestResult(math.copysign(math.inf, diff), 0.0)
    t = float(diff / math.sqrt(pooled * (1.0 / n1 + 1.0 / n2)))
    return TestResult(t, student_t_sf2(t, n1 + n2 - 2))


def levene_test(l1, l2) -> TestResult:
    """Levene's test for equal variances, centered on the group means."""
    a, b, ok = _pair(l1, l2)
    if not ok:
        return _SKIPPED
    za = np.abs(a - a.mean())
    zb = np.abs(b - b.mean())
    n = a.size + b.size
    grand = (za.sum() + zb.sum()) / n
    between = a.size * (za.mean() - grand) ** 2 + b.size * (zb.mean() - grand) ** 2
    within = ((za - za.mean()) ** 2).sum() + ((zb - zb.mean()) ** 2).sum()
    if within == 0.0:
        return _SKIPPED
    w = float((n - 2) * between / within)
    return TestResult(w, f_sf(w, 1.0, n - 2.0))


def ks_test(l1, l2) -> TestResult:
    """Two-sample Kolmogorov-Smirnov test with the asymptotic p-value."""
    a, b, ok = _pair(l1, l2)
    if not ok:
        return _SKIPPED
    a = np.sort(a)
    b = np.sort(b)
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    d = float(np.max(np.abs(cdf_a - cdf_b)))
    lam = d * math.sqrt(a.size * b.size / (a.size + b.size))
    return TestResult(d, kolmogorov_sf(lam))


def three_sigma_outliers(values) -> tuple[tuple[int, ...], bool]:
    """Indices more than three sample standard deviations from the mean.

    Returns ``(indices, performed)``; fewer than four values skips the rule.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < MIN_SIGMA_POPULATION:
        return (), False
    s = arr.std(ddof=1)
    flagged = np.flatnonzero(np.abs(arr - arr.mean()) > 3.0 * s)
    return tuple(flagged.tolist()), True
