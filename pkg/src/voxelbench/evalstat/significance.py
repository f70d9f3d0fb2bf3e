"""Paired significance tests, significance marks and improvement ratios."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateTestError

EXACT_WILCOXON_MAX_N = 25
_MARKS = ((0.001, "***"), (0.01, "**"), (0.05, "*"), (0.10, "+"))


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    )
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return min(1.0, betainc(0.5 * df, 0.5, df / (df + t * t)))


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float
    zero_variance: bool = False


def paired_t_test(a, b) -> TTestResult:
    """Two-sided paired t-test on ``a - b``.

    Constant non-zero differences give an infinite statistic and p = 0 with
    ``zero_variance`` set; all-zero differences raise ``DegenerateTestError``.
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("paired t-test needs two equal-length samples with n >= 2")
    n = d.size
    if np.all(d == 0):
        raise DegenerateTestError("all paired differences are zero")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0 or sd <= 1e-14 * abs(mean):
        return TTestResult(math.copysign(math.inf, mean), n - 1, 0.0, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(float(t), n - 1, t_two_sided_p(float(t), n - 1))


@dataclass(frozen=True)
class WilcoxonResult:
    w: float
    p: float
    n: int
    exact: bool


def average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def signed_rank_null_counts(n: int) -> np.ndarray:
    """Number of sign assignments giving each positive-rank sum 0..n(n+1)/2."""
    counts = np.zeros(n * (n + 1) // 2 + 1, dtype=object)
    counts[0] = 1
    top = 0
    for r in range(1, n + 1):
        counts[r : top + r + 1] = counts[r : top + r + 1] + counts[: top + 1]
        top += r
    return counts


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test on ``a - b`` (zeros dropped)."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    n = d.size
    if n == 0:
        raise DegenerateTestError("all paired differences are zero")
    ranks = average_ranks(np.abs(d))
    w = float(ranks[d > 0].sum())
    ties = len(np.unique(np.abs(d))) < n
    if n <= EXACT_WILCOXON_MAX_N and not ties:
        counts = signed_rank_null_counts(n)
        total = 2**n
        wi = int(round(w))
        lower = sum(counts[: wi + 1]) / total
        upper = sum(counts[wi:]) / total
        p = min(1.0, 2.0 * min(float(lower), float(upper)))
        return WilcoxonResult(w, p, n, True)
    _, tie_sizes = np.unique(ranks, return_counts=True)
    z = w - n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    if var <= 0:
        return WilcoxonResult(w, 1.0, n, False)
    z = (z - math.copysign(0.5, z) if z != 0 else 0.0) / math.sqrt(var)
    p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return WilcoxonResult(w, p, n, False)


def significance_mark(p: float) -> str:
    """'+', '*', '**', '***' for p < 0.10 / 0.05 / 0.01 / 0.001, else ''."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p-value outside [0, 1]: {p}")
    for threshold, mark in _MARKS:
        if p < threshold:
            return mark
    return ""


def improvement_percent(favored: float, other: float) -> float:
    if not favored > 0:
        raise ValueError(f"favored value must be positive, got {favored}")
    return other / favored * 100.0


@dataclass(frozen=True)
class PairedTestResult:
    t_statistic: float
    t_p_value: float
    wilcoxon_w: float
    wilcoxon_p: float
    n_pairs: int
    zero_variance: bool = False

    @property
    def mark(self) -> str:
        return significance_mark(min(self.t_p_value, self.wilcoxon_p))

    @property
    def t_mark(self) -> str:
        return significance_mark(self.t_p_value)

    @property
    def wilcoxon_mark(self) -> str:
        return significance_mark(self.wilcoxon_p)


def paired_tests(a, b) -> PairedTestResult:
    """Both paired tests; identical samples yield t = 0, p = 1 instead of an error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    if np.all(a == b):
        return PairedTestResult(0.0, 1.0, 0.0, 1.0, a.size)
    if a.size < 2:
        wr = wilcoxon_signed_rank(a, b)
        return PairedTestResult(math.nan, 1.0, wr.w, wr.p, a.size)
    tr = paired_t_test(a, b)
    wr = wilcoxon_signed_rank(a, b)
    return PairedTestResult(tr.t, tr.p, wr.w, wr.p, a.size, tr.zero_variance)
