"""Univariate (Shapiro-Wilk) and multivariate (Mardia) normality tests."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

ALPHA = 0.05

# Royston (1995) polynomial coefficients, AS R94
_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coefs, x: float) -> float:
    return sum(c * x**i for i, c in enumerate(coefs))


def _swilk_coefficients(n: int) -> np.ndarray:
    """Weights a_1..a_{n//2} for the lower half of the order statistics."""
    half = n // 2
    if n == 3:
        return np.array([math.sqrt(0.5)])
    i = np.arange(1, half + 1)
    m = stats.norm.ppf((i - 0.375) / (n + 0.25))  # negative for the lower half
    summ2 = 2.0 * float(np.sum(m * m))
    ssumm2 = math.sqrt(summ2)
    rsn = 1.0 / math.sqrt(n)
    a = np.empty(half)
    a1 = _poly(_C1, rsn) - m[0] / ssumm2
    if n > 5:
        a2 = -m[1] / ssumm2 + _poly(_C2, rsn)
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2 - 2.0 * m[1] ** 2) / (1.0 - 2.0 * a1**2 - 2.0 * a2**2))
        a[1] = a2
        start = 2
    else:
        fac = math.sqrt((summ2 - 2.0 * m[0] ** 2) / (1.0 - 2.0 * a1**2))
        start = 1
    a[0] = a1
    a[start:] = -m[start:] / fac
    return a


def shapiro_wilk(x) -> tuple[float, float]:
    """Shapiro-Wilk W and p-value with Royston's approximation (3 <= n <= 5000)."""
    x = np.sort(np.asarray(x, dtype=np.float64).ravel())
    n = x.size
    if n < 3:
        raise ValueError(f"Shapiro-Wilk needs at least 3 observations, got {n}")
    if n > 5000:
        raise ValueError(f"Royston's approximation is valid up to n = 5000, got {n}")
    if x[-1] - x[0] <= 0:
        raise ValueError("all observations are equal")
    a = _swilk_coefficients(n)
    half = n // 2
    num = float(np.dot(a, x[::-1][:half] - x[:half]))
    ss = float(np.sum((x - x.mean()) ** 2))
    w = min(num * num / ss, 1.0)

    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(w)) - math.pi / 3.0)
        return w, max(p, 0.0)
    w1 = math.log1p(-w) if w < 1.0 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if w1 >= gamma:
            return w, 1e-99
        y = -math.log(gamma - w1)
        mu = _poly(_C3, n)
        sigma = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        y = w1
        mu = _poly(_C5, ln)
        sigma = math.exp(_poly(_C6, ln))
    if not math.isfinite(y):
        return w, 1.0
    return w, float(stats.norm.sf(y, loc=mu, scale=sigma))


@dataclass
class MardiaResult:
    skewness: float  # b_{1,p}
    kurtosis: float  # b_{2,p}
    skew_stat: float  # n b_{1,p} / 6, chi-square reference
    kurt_stat: float  # standardized b_{2,p}, normal reference
    p_skew: float
    p_kurt: float
    reject: bool


def mardia_test(samples, alpha: float = ALPHA) -> MardiaResult:
    """Mardia's multivariate skewness and kurtosis tests.

    The joint decision holds the family-wise level at ``alpha``: each of
    the two component tests is run at ``alpha / 2`` (Bonferroni).
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected an n x d matrix, got shape {x.shape}")
    n, d = x.shape
    if n <= d:
        raise ValueError(f"need more observations than dimensions (n={n}, d={d})")
    xc = x - x.mean(axis=0)
    s = xc.T @ xc / n
    g = xc @ np.linalg.solve(s, xc.T)
    b1 = float(np.mean(g**3))
    b2 = float(np.mean(np.diag(g) ** 2))
    skew_stat = n * b1 / 6.0
    df = d * (d + 1) * (d + 2) / 6.0
    kurt_stat = (b2 - d * (d + 2)) / math.sqrt(8.0 * d * (d + 2) / n)
    p_skew = float(stats.chi2.sf(skew_stat, df))
    p_kurt = float(2.0 * stats.norm.sf(abs(kurt_stat)))
    return MardiaResult(b1, b2, skew_stat, kurt_stat, p_skew, p_kurt, bool(min(p_skew, p_kurt) < alpha / 2))
