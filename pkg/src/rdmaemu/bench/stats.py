"""Small statistics helpers used by the shape checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats


@dataclass(frozen=True)
class TestResult:
    statistic: float
    pvalue: float

    def significant(self, alpha: float = 0.05) -> bool:
        return self.pvalue < alpha


def noise_floor(samples) -> float:
    """Median absolute deviation of repeated measurements."""
    return float(stats.median_abs_deviation(np.asarray(samples, dtype=float)))


def sign_test(diffs, alternative: str = "greater") -> TestResult:
    """One-sample sign test on paired differences; ties are dropped."""
    d = np.asarray(diffs, dtype=float)
    d = d[d != 0]
    if d.size == 0:
        return TestResult(0.0, 1.0)
    k = int((d > 0).sum())
    res = stats.binomtest(k, int(d.size), 0.5, alternative=alternative)
    return TestResult(float(k), float(res.pvalue))


def trend_test(xs, ys) -> TestResult:
    """Kendall's tau, one-sided for an increasing trend."""
    tau = stats.kendalltau(xs, ys, alternative="greater")
    p = float(tau.pvalue) if np.isfinite(tau.pvalue) else 1.0
    return TestResult(float(tau.statistic) if np.isfinite(tau.statistic) else 0.0, p)


def linear_fit(xs, ys) -> tuple[float, float, float]:
    """Least-squares fit; returns (slope, intercept, r_squared)."""
    fit = stats.linregress(np.asarray(xs, dtype=float), np.asarray(ys, dtype=float))
    return float(fit.slope), float(fit.intercept), float(fit.rvalue ** 2)


def spread_ratio(values) -> float:
    """max/min of strictly positive values; inf if any value is not positive."""
    v = np.asarray(values, dtype=float)
    if v.size == 0 or (v <= 0).any():
        return float("inf")
    return float(v.max() / v.min())
