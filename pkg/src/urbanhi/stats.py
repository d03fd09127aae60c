"""KS tests, linear trends, standardized effect sizes and block bootstrap."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Callable, Hashable, Mapping, Sequence

import numpy as np
from scipy import stats as _st

STAR_LEVELS = ((0.01, "***"), (0.05, "**"), (0.10, "*"))


def stars_for(p: float) -> str:
    for level, mark in STAR_LEVELS:
        if p < level:
            return mark
    return ""


@dataclass(frozen=True)
class KsResult:
    d_statistic: float
    p_value: float
    n1: int
    n2: int
    stars: str

    def to_dict(self) -> dict:
        return asdict(self)


def ks_statistic(a, b) -> float:
    """sup |ECDF_a - ECDF_b| from a sweep over the merged sorted samples."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    n1, n2 = a.size, b.size
    i = j = 0
    best = 0
    while i < n1 and j < n2:
        v = min(a[i], b[j])
        while i < n1 and a[i] == v:
            i += 1
        while j < n2 and b[j] == v:
            j += 1
        # integer gap keeps D exact up to the final division
        best = max(best, abs(i * n2 - j * n1))
    return best / (n1 * n2)


def kolmogorov_sf(lam: float, terms: int = 100) -> float:
    """Survival function of the Kolmogorov distribution, Q(lam) = P(K > lam)."""
    if lam <= 0:
        return 1.0
    if lam < 1.0:
        # the alternating series converges poorly here; use the theta-function form
        s = sum(math.exp(-((2 * k - 1) ** 2) * math.pi ** 2 / (8 * lam * lam)) for k in range(1, terms + 1))
        return min(1.0, max(0.0, 1.0 - math.sqrt(2 * math.pi) / lam * s))
    s = sum((-1) ** (k - 1) * math.exp(-2 * k * k * lam * lam) for k in range(1, terms + 1))
    return min(1.0, max(0.0, 2.0 * s))


def ks_two_sample(a, b) -> KsResult:
    """Two-sample KS test with the asymptotic p-value at effective n = n1 n2 / (n1 + n2)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("KS test needs two non-empty samples")
    d = ks_statistic(a, b)
    ne = a.size * b.size / (a.size + b.size)
    p = kolmogorov_sf(math.sqrt(ne) * d)
    return KsResult(d, p, int(a.size), int(b.size), stars_for(p))


@dataclass(frozen=True)
class TrendResult:
    slope: float
    intercept: float
    p_value: float
    significant_05: bool
    n: int
    stderr: float

    def to_dict(self) -> dict:
        return asdict(self)


def linear_trend(years, values) -> TrendResult:
    """OLS line with a two-sided t-test on the slope (n - 2 dof)."""
    x = np.asarray(years, dtype=np.float64).ravel()
    y = np.asarray(values, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError("years and values differ in length")
    if x.size < 3:
        raise ValueError("a trend needs at least 3 points")
    if np.all(x == x[0]):
        raise ValueError("years must not all be equal")
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    dof = x.size - 2
    se = math.sqrt(float(np.sum(resid ** 2)) / dof / sxx) if dof > 0 else float("nan")
    if se == 0.0:
        p = 1.0 if slope == 0.0 else 0.0
    else:
        p = float(2.0 * _st.t.sf(abs(slope / se), dof))
    return TrendResult(slope, intercept, p, p < 0.05, int(x.size), se)


@dataclass(frozen=True)
class EffectSizes:
    feature: str
    r_sd: float
    r_rmse: float
    mean_abs_shap: float

    def to_dict(self) -> dict:
        return asdict(self)


def effect_sizes(phi, feature_names: Sequence[str], hi_values, rmse: float) -> list[EffectSizes]:
    """Mean |SHAP| per feature relative to the HI standard deviation and to the model RMSE."""
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    hi = np.asarray(hi_values, dtype=np.float64).ravel()
    if phi.size == 0 or hi.size == 0:
        raise ValueError("effect sizes need non-empty SHAP values and HI values")
    sd = float(hi.std())
    if sd <= 0:
        raise ValueError("HI standard deviation is zero")
    if not rmse > 0:
        raise ValueError("RMSE must be positive")
    mabs = np.abs(phi).mean(0)
    return [EffectSizes(n, float(m / sd), float(m / rmse), float(m)) for n, m in zip(feature_names, mabs)]


@dataclass(frozen=True)
class BootstrapResult:
    replicates: np.ndarray
    low: float
    high: float
    estimate: float
    n_blocks: int

    def to_dict(self) -> dict:
        return {"estimate": self.estimate, "low": self.low, "high": self.high, "n_blocks": self.n_blocks,
                "n_replicates": int(self.replicates.size)}


def block_bootstrap(summary_fn: Callable[[np.ndarray], float], records: Mapping[Hashable, Sequence[float]],
                    n_replicates: int = 1000, seed: int = 0, level: float = 0.95) -> BootstrapResult:
    """Percentile interval of ``summary_fn`` under resampling whole blocks with replacement.

    ``records`` maps a block key, e.g. (city, year), to that block's values.
    """
    keys = sorted(records, key=repr)
    if len(keys) < 2:
        raise ValueError("block bootstrap needs at least 2 blocks")
    blocks = [np.asarray(records[k], dtype=np.float64).ravel() for k in keys]
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(blocks), size=(n_replicates, len(blocks)))
    reps = np.array([summary_fn(np.concatenate([blocks[i] for i in row])) for row in draws], dtype=np.float64)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(reps, [alpha, 1.0 - alpha])
    return BootstrapResult(reps, float(lo), float(hi), float(summary_fn(np.concatenate(blocks))), len(blocks))
