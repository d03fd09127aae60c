"""Accumulated Local Effects, zero-level isolines, Friedman's H^2 and pair selection."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

Predict = Callable[[np.ndarray], np.ndarray]


def _predictor(model) -> Predict:
    if callable(model) and not hasattr(model, "predict"):
        return model
    return model.predict


def _column(data, feature, names):
    if isinstance(feature, str):
        if names is None:
            raise ValueError("feature given by name but no feature names supplied")
        return list(names).index(feature)
    return int(feature)


def quantile_edges(x: np.ndarray, n_bins: int) -> np.ndarray:
    """Quantile bin edges with duplicates merged."""
    return np.unique(np.quantile(x, np.linspace(0.0, 1.0, n_bins + 1)))


def _bin_index(x: np.ndarray, edges: np.ndarray) -> np.ndarray:
    # bins are (e[k-1], e[k]]; the lowest edge belongs to bin 0
    return np.clip(np.searchsorted(edges, x, side="left") - 1, 0, len(edges) - 2)


@dataclass
class AleCurve:
    feature: str
    bin_edges: np.ndarray
    effects: np.ndarray
    counts: np.ndarray

    def to_dict(self) -> dict:
        return {
            "feature": self.feature,
            "bin_edges": self.bin_edges.tolist(),
            "effects": self.effects.tolist(),
            "counts": self.counts.tolist(),
        }

    def __call__(self, x) -> np.ndarray:
        return np.interp(x, self.bin_edges, self.effects)


def ale_1d(model, data, feature, n_bins: int = 20, feature_names: Sequence[str] | None = None) -> AleCurve:
    """First-order ALE curve evaluated at quantile bin edges.

    Per bin, the local effect is the mean prediction change when the feature
    of the in-bin samples moves from the lower to the upper edge. Effects are
    accumulated and centered so the count-weighted mean over bins (using bin
    midpoint effects) is zero.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("ALE needs a non-empty 2-D data table")
    f = _predictor(model)
    j = _column(X, feature, feature_names)
    name = feature if isinstance(feature, str) else (feature_names[j] if feature_names else str(j))
    x = X[:, j]
    edges = quantile_edges(x, n_bins)
    if edges.size < 2:
        return AleCurve(name, np.array([x[0], x[0]]), np.zeros(2), np.array([x.size]))
    k = _bin_index(x, edges)
    lo, hi = X.copy(), X.copy()
    lo[:, j] = edges[k]
    hi[:, j] = edges[k + 1]
    diff = f(hi) - f(lo)
    counts = np.bincount(k, minlength=edges.size - 1)
    sums = np.bincount(k, weights=diff, minlength=edges.size - 1)
    local = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    acc = np.concatenate([[0.0], np.cumsum(local)])
    mid = 0.5 * (acc[:-1] + acc[1:])
    acc -= np.sum(counts * mid) / counts.sum()
    return AleCurve(name, edges, acc, counts)


@dataclass
class AleSurface:
    pair: tuple
    edges_x: np.ndarray
    edges_y: np.ndarray
    effects: np.ndarray
    counts: np.ndarray
    imputed: np.ndarray = field(default=None)

    def to_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "edges_x": self.edges_x.tolist(),
            "edges_y": self.edges_y.tolist(),
            "effects": self.effects.tolist(),
            "counts": self.counts.tolist(),
            "imputed_cells": self.imputed.astype(int).tolist() if self.imputed is not None else [],
        }

    @staticmethod
    def cell_means(grid: np.ndarray) -> np.ndarray:
        return 0.25 * (grid[:-1, :-1] + grid[1:, :-1] + grid[:-1, 1:] + grid[1:, 1:])


def _impute_nearest(values: np.ndarray, counts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    empty = counts == 0
    if not empty.any():
        return values, empty
    full = np.argwhere(~empty)
    out = values.copy()
    for r, c in np.argwhere(empty):
        d2 = (full[:, 0] - r) ** 2 + (full[:, 1] - c) ** 2
        # argmin picks the first populated cell in row-major order on ties
        rr, cc = full[np.argmin(d2)]
        out[r, c] = values[rr, cc]
    return out, empty


def ale_2d(model, data, pair, n_bins: int = 10, feature_names: Sequence[str] | None = None) -> AleSurface:
    """Second-order (pure interaction) ALE surface on a quantile grid.

    Cell effects are second differences of the prediction across the cell's
    four corners, averaged over in-cell samples. They are accumulated in both
    directions; the first-order effects implied by the accumulated surface are
    then removed and the result is centered to a zero count-weighted mean.
    Empty cells borrow the value of the nearest populated cell and are listed
    in ``imputed``.
    """
    X = np.asarray(data, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("ALE needs a non-empty 2-D data table")
    f = _predictor(model)
    a = _column(X, pair[0], feature_names)
    b = _column(X, pair[1], feature_names)
    names = tuple(p if isinstance(p, str) else (feature_names[i] if feature_names else str(i))
                  for p, i in zip(pair, (a, b)))
    ex = quantile_edges(X[:, a], n_bins)
    ey = quantile_edges(X[:, b], n_bins)
    if ex.size < 2 or ey.size < 2:
        raise ValueError("both features of an ALE pair must be non-constant")
    kx, ky = _bin_index(X[:, a], ex), _bin_index(X[:, b], ey)
    K, L = ex.size - 1, ey.size - 1

    def at(xv, yv):
        Z = X.copy()
        Z[:, a] = xv
        Z[:, b] = yv
        return f(Z)

    d2 = (
        at(ex[kx + 1], ey[ky + 1])
        - at(ex[kx], ey[ky + 1])
        - at(ex[kx + 1], ey[ky])
        + at(ex[kx], ey[ky])
    )
    cell = kx * L + ky
    counts = np.bincount(cell, minlength=K * L).reshape(K, L)
    sums = np.bincount(cell, weights=d2, minlength=K * L).reshape(K, L)
    local = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    local, imputed = _impute_nearest(local, counts)

    acc = np.zeros((K + 1, L + 1))
    acc[1:, 1:] = np.cumsum(np.cumsum(local, axis=0), axis=1)

    # first-order parts implied by the accumulated surface
    w = counts.astype(np.float64)
    dx = acc[1:, :] - acc[:-1, :]
    dx_mid = 0.5 * (dx[:, :-1] + dx[:, 1:])
    row_w = w.sum(1)
    main_x = np.concatenate([[0.0], np.cumsum(np.divide((w * dx_mid).sum(1), row_w, out=np.zeros(K), where=row_w > 0))])
    dy = acc[:, 1:] - acc[:, :-1]
    dy_mid = 0.5 * (dy[:-1, :] + dy[1:, :])
    col_w = w.sum(0)
    main_y = np.concatenate([[0.0], np.cumsum(np.divide((w * dy_mid).sum(0), col_w, out=np.zeros(L), where=col_w > 0))])
    acc = acc - main_x[:, None] - main_y[None, :]
    acc -= np.sum(w * AleSurface.cell_means(acc)) / w.sum()
    return AleSurface(names, ex, ey, acc, counts, imputed)


# ---------------------------------------------------------------------------
# isolines


def zero_crossing_isolines(surface: AleSurface, level: float = 0.0) -> list[np.ndarray]:
    """Marching-squares contours of the effect surface at ``level`` in feature coordinates.

    Each polyline is an (m, 2) array of (x, y) points.
    """
    from skimage.measure import find_contours

    z = np.asarray(surface.effects, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("surface contains non-finite values")
    if z.min() > level or z.max() < level or z.min() == z.max():
        return []
    lines = []
    ix = np.arange(surface.edges_x.size)
    iy = np.arange(surface.edges_y.size)
    for c in find_contours(z, level):
        xs = np.interp(c[:, 0], ix, surface.edges_x)
        ys = np.interp(c[:, 1], iy, surface.edges_y)
        lines.append(np.column_stack([xs, ys]))
    return lines


# ---------------------------------------------------------------------------
# H^2 interaction statistic


@dataclass(frozen=True)
class InteractionScore:
    pair: tuple
    h2: float
    raw_h2: float
    year: int | None = None
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"pair": list(self.pair), "h2": self.h2, "raw_h2": self.raw_h2, "year": self.year,
                "degenerate": self.degenerate}


def _partial_dependence(f: Predict, X: np.ndarray, cols: Sequence[int], batch_rows: int = 200_000) -> np.ndarray:
    """PD at each row's own values of ``cols``, averaged over all rows; centered."""
    n = X.shape[0]
    out = np.empty(n)
    per = max(1, batch_rows // n)
    for s in range(0, n, per):
        anchors = np.arange(s, min(n, s + per))
        # one block of n rows per anchor, with ``cols`` pinned to the anchor's values
        Z = np.tile(X, (anchors.size, 1))
        Z[:, cols] = np.repeat(X[anchors][:, cols], n, axis=0)
        out[anchors] = f(Z).reshape(anchors.size, n).mean(1)
    return out - out.mean()


def h2_interaction(model, data, pair, eval_sample_size: int = 200, seed: int = 0,
                   feature_names: Sequence[str] | None = None, year: int | None = None) -> InteractionScore:
    """Friedman-Popescu H^2 for a feature pair from centered partial dependences."""
    X = np.asarray(data, dtype=np.float64)
    f = _predictor(model)
    a = _column(X, pair[0], feature_names)
    b = _column(X, pair[1], feature_names)
    names = tuple(p if isinstance(p, str) else (feature_names[i] if feature_names else str(i))
                  for p, i in zip(pair, (a, b)))
    if np.ptp(X[:, a]) == 0 or np.ptp(X[:, b]) == 0:
        raise ValueError("both features of an H^2 pair must be non-constant")
    if X.shape[0] > eval_sample_size:
        rng = np.random.default_rng(seed)
        X = X[np.sort(rng.choice(X.shape[0], eval_sample_size, replace=False))]
    pd_a = _partial_dependence(f, X, [a])
    pd_b = _partial_dependence(f, X, [b])
    pd_ab = _partial_dependence(f, X, [a, b])
    den = float(np.sum(pd_ab ** 2))
    if den < 1e-12:
        return InteractionScore(names, 0.0, 0.0, year, degenerate=True)
    raw = float(np.sum((pd_ab - pd_a - pd_b) ** 2) / den)
    return InteractionScore(names, min(max(raw, 0.0), 1.0), raw, year)


# ---------------------------------------------------------------------------
# strongest-pair selection


@dataclass(frozen=True)
class PairSelection:
    pair: tuple
    rationale: str
    candidate: tuple
    recent_mean: float
    long_run_mean: float
    long_run_std: float
    tolerance: float

    def to_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "rationale": self.rationale,
            "candidate": list(self.candidate),
            "candidate_recent_mean": self.recent_mean,
            "candidate_long_run_mean": self.long_run_mean,
            "candidate_long_run_std": self.long_run_std,
            "tolerance": self.tolerance,
        }


def select_strongest_pair(scores: Mapping[tuple, Sequence[float]], recent_years: int = 5,
                          min_tolerance: float = 0.02) -> PairSelection:
    """Pick the pair whose recent mean H^2 is highest, if it is stable.

    The candidate (highest mean over the last ``recent_years``) is accepted
    when that mean lies within max(long-run std, ``min_tolerance``) of its
    long-run mean. Otherwise the pair with the highest long-run mean wins.
    Ties go to the lexicographically smallest pair.
    """
    if not scores:
        raise ValueError("no pair scores given")
    series = {tuple(k): np.asarray(v, dtype=np.float64) for k, v in scores.items()}
    pairs = sorted(series)
    long_mean = {p: float(series[p].mean()) for p in pairs}
    long_std = {p: float(series[p].std()) for p in pairs}
    best = max(long_mean.values())
    leader = min(p for p in pairs if long_mean[p] == best)

    if any(len(series[p]) < recent_years for p in pairs):
        return PairSelection(leader, "short_series", leader, float("nan"), long_mean[leader], long_std[leader],
                             float("nan"))
    recent = {p: float(series[p][-recent_years:].mean()) for p in pairs}
    top = max(recent.values())
    cand = min(p for p in pairs if recent[p] == top)
    tol = max(long_std[cand], min_tolerance)
    stable = abs(recent[cand] - long_mean[cand]) <= tol
    if len(pairs) == 1:
        return PairSelection(cand, "single_pair", cand, recent[cand], long_mean[cand], long_std[cand], tol)
    if stable:
        return PairSelection(cand, "stable_recent", cand, recent[cand], long_mean[cand], long_std[cand], tol)
    return PairSelection(leader, "long_run_fallback", cand, recent[cand], long_mean[cand], long_std[cand], tol)
