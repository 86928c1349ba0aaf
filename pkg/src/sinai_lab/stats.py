"""Small statistics helpers: log-growth fits, KS distances, decade increments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LogFit:
    intercept: float
    slope: float
    r2: float | None

    @property
    def r2_defined(self) -> bool:
        return self.r2 is not None


def fit_log_growth(N, counts) -> LogFit:
    """Least squares of ``count = a + b log N``.

    A constant curve has no variance to explain, so its R^2 is reported as
    undefined (``None``) with slope 0.
    """
    N = np.asarray(N, dtype=float)
    y = np.asarray(counts, dtype=float)
    if N.shape != y.shape or N.ndim != 1:
        raise ValueError("N and counts must be 1-d arrays of equal length")
    if len(N) < 4:
        raise ValueError("need at least 4 points")
    if np.any(N <= 0):
        raise ValueError("horizons must be positive")
    x = np.log(N)
    if np.ptp(y) == 0.0:
        return LogFit(float(y[0]), 0.0, None)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (intercept + slope * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot
    return LogFit(float(intercept), float(slope), r2)


def ks_exponential(samples) -> float:
    """Sup distance between the empirical CDF of ``samples`` and ``1 - exp(-x)``."""
    x = np.sort(np.asarray(samples, dtype=float))
    if x.ndim != 1 or len(x) == 0:
        raise ValueError("empty sample")
    if len(x) < 30:
        raise ValueError("need at least 30 samples")
    if np.any(~np.isfinite(x)) or np.any(x < 0):
        raise ValueError("samples must be finite and nonnegative")
    n = len(x)
    F = -np.expm1(-x)
    upper = np.arange(1, n + 1) / n - F
    lower = F - np.arange(n) / n
    return float(max(upper.max(), lower.max()))


def ks_two_sample(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov distance (ties handled exactly)."""
    a = np.sort(np.asarray(a, dtype=float))
    b = np.sort(np.asarray(b, dtype=float))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty sample")
    grid = np.union1d(a, b)
    Fa = np.searchsorted(a, grid, side="right") / len(a)
    Fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(Fa - Fb)))


@dataclass(frozen=True)
class DecadeIncrements:
    """Mean increase of a per-trial cumulative count over consecutive horizons.

    ``ratio`` compares the last increment with the first; a count growing
    like ``c log N`` has ratio near 1, a convergent one has ratio near 0.
    """

    horizons: np.ndarray
    inc: np.ndarray
    se: np.ndarray
    ratio: float
    ratio_se: float

    def grows(self, z: float, ratio_min: float) -> bool:
        """Every increment is positive at ``z`` standard errors and ``ratio >= ratio_min``."""
        return bool(np.all(self.inc > z * self.se) and self.ratio >= ratio_min)

    def flattens(self, z: float, ratio_max: float) -> bool:
        """Upper ``z``-sigma bound of the ratio stays at or below ``ratio_max``."""
        return bool(self.ratio + z * self.ratio_se <= ratio_max)


TRANSFORMS = {"identity": lambda x: x, "log1p": np.log1p}


def decade_increments(per_trial: np.ndarray, horizons, transform: str = "identity") -> DecadeIncrements:
    """Increments of ``per_trial[:, i]`` between consecutive horizons with paired errors.

    ``per_trial`` has one row per trial and one column per horizon. With
    ``transform="log1p"`` the counts are replaced by ``log(1 + count)``, which
    tames the heavy tails of counts driven by a few deep valleys while keeping
    their order.
    """
    if transform not in TRANSFORMS:
        raise ValueError(f"unknown transform {transform!r}")
    X = TRANSFORMS[transform](np.asarray(per_trial, dtype=float))
    T = X.shape[0]
    if T < 2 or X.shape[1] < 2:
        raise ValueError("need at least 2 trials and 2 horizons")
    D = np.diff(X, axis=1)
    inc = D.mean(axis=0)
    se = D.std(axis=0, ddof=1) / math.sqrt(T)
    first, last = D[:, 0], D[:, -1]
    a, b = first.mean(), last.mean()
    if a <= 0:
        return DecadeIncrements(np.asarray(horizons), inc, se, float("nan"), float("nan"))
    ratio = b / a
    # delta method for a ratio of paired means
    cov = np.cov(np.vstack([last, first])) / T
    g = np.array([1 / a, -b / a**2])
    rse = math.sqrt(max(float(g @ cov @ g), 0.0))
    return DecadeIncrements(np.asarray(horizons), inc, se, float(ratio), rse)


def decreasing_at(values: np.ndarray, z: float) -> tuple[bool, np.ndarray, np.ndarray]:
    """Paired test that column means strictly decrease at ``z`` standard errors.

    ``values`` has one row per sampled environment. Returns the verdict, the
    mean differences between consecutive columns and their standard errors.
    """
    X = np.asarray(values, dtype=float)
    D = X[:, :-1] - X[:, 1:]
    m = D.mean(axis=0)
    se = D.std(axis=0, ddof=1) / math.sqrt(X.shape[0])
    return bool(np.all(m > z * se)), m, se
