"""Interventional TreeSHAP against a compressed background, and SHAP summaries."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import _kernels
from .grid import FeatureStack, Grid, GridHeader, GridError
from .trees import DecisionTree, ForestModel, GbmModel, TrainParams, _Packed, fit_random_forest

DOWNSCALING_LAYERS = ("LST", "WSA", "POP", "RAD", "DPT", "IMP", "DCOAST", "LAT", "LON")
EXPLANATION_LAYERS = ("EVI", "LAI", "FPAR", "NTL")
EFFICIENCY_TOL = 1e-6


class LeakageError(ValueError):
    pass


class NumericFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# background compression


@dataclass(frozen=True, eq=False)
class BackgroundSet:
    centroids: np.ndarray
    weights: np.ndarray
    source_size: int
    feature_names: tuple = ()

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.centroids, dtype=np.float64))
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if c.shape[0] < 1:
            raise ValueError("background needs at least one centroid")
        if w.shape[0] != c.shape[0] or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("background weights must be non-negative and sum to 1")
        object.__setattr__(self, "centroids", c)
        object.__setattr__(self, "weights", w)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def to_dict(self) -> dict:
        return {
            "centroids": self.centroids.tolist(),
            "weights": self.weights.tolist(),
            "source_size": self.source_size,
            "feature_names": list(self.feature_names),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "BackgroundSet":
        return cls(np.asarray(d["centroids"]), np.asarray(d["weights"]), int(d["source_size"]),
                   tuple(d.get("feature_names", ())))


def _kmeans_pp(Z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = Z.shape[0]
    centers = np.empty((k, Z.shape[1]))
    centers[0] = Z[rng.integers(n)]
    d2 = np.sum((Z - centers[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        i = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers[j] = Z[i]
        d2 = np.minimum(d2, np.sum((Z - centers[j]) ** 2, axis=1))
    return centers


def _nearest(Z: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = (Z * Z).sum(1)[:, None] - 2.0 * Z @ centers.T + (centers * centers).sum(1)[None, :]
    return np.argmin(d2, axis=1)


def compress_background(samples, k: int = 64, seed: int = 0, batch_size: int = 256, max_iter: int = 100,
                        feature_names: Sequence[str] = ()) -> BackgroundSet:
    """Summarize ``samples`` by MiniBatch K-means centroids weighted by cluster size.

    Clustering runs on standardized columns (k-means++ seeding, per-center
    1/count learning rate); centroids are mapped back to raw units.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    n = X.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"K={k} must be in [1, {n}]")
    if k == n:
        return BackgroundSet(X.copy(), np.full(n, 1.0 / n), n, tuple(feature_names))

    mu = X.mean(0)
    sd = X.std(0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(Z, k, rng)
    counts = np.zeros(k)
    b = min(batch_size, n)
    for _ in range(max_iter):
        batch = Z[rng.choice(n, size=b, replace=False)]
        lab = _nearest(batch, centers)
        for j in np.unique(lab):
            pts = batch[lab == j]
            # sequential 1/count updates over a batch reduce to a running mean
            centers[j] = (counts[j] * centers[j] + pts.sum(0)) / (counts[j] + len(pts))
            counts[j] += len(pts)

    lab = _nearest(Z, centers)
    sizes = np.bincount(lab, minlength=k).astype(np.float64)
    keep = sizes > 0
    return BackgroundSet(centers[keep] * sd + mu, sizes[keep] / n, n, tuple(feature_names))


# ---------------------------------------------------------------------------
# explainer model


def check_explanation_features(names: Sequence[str]) -> None:
    leaked = [n for n in names if n.upper() in DOWNSCALING_LAYERS]
    if leaked:
        raise LeakageError(f"downscaling predictors {leaked} are not allowed in the explainer")
    unknown = [n for n in names if n.upper() not in EXPLANATION_LAYERS and not n.upper().startswith("LCZ_")]
    if unknown:
        raise LeakageError(f"explainer features must be EVI, LAI, FPAR, NTL or LCZ_* fractions; got {unknown}")


def fit_explainer(X, y, feature_names: Sequence[str], params: TrainParams | None = None, **rf_kwargs) -> ForestModel:
    """Random forest on greening and urban-form features only."""
    check_explanation_features(feature_names)
    return fit_random_forest(X, y, params=params, feature_names=feature_names, **rf_kwargs)


# ---------------------------------------------------------------------------
# attribution


_WEIGHT_CACHE: dict = {}


def _weight_tables(d: int):
    if d not in _WEIGHT_CACHE:
        wx = np.zeros((d + 1, d + 1))
        wr = np.zeros((d + 1, d + 1))
        for a in range(d + 1):
            for b in range(d + 1 - a):
                denom = math.lgamma(a + b + 1)
                if a >= 1:
                    wx[a, b] = math.exp(math.lgamma(a) + math.lgamma(b + 1) - denom)
                if b >= 1:
                    wr[a, b] = math.exp(math.lgamma(a + 1) + math.lgamma(b) - denom)
        _WEIGHT_CACHE[d] = (wx, wr)
    return _WEIGHT_CACHE[d]


def _ensemble_parts(model):
    """(packed trees, output scale, output offset) so that f(x) = offset + scale * sum_t tree_t(x)."""
    if isinstance(model, ForestModel):
        trees, scale, offset = model.trees, 1.0 / len(model.trees), 0.0
    elif isinstance(model, GbmModel):
        trees, scale, offset = model.trees, model.learning_rate, model.init_value
    elif isinstance(model, DecisionTree):
        trees, scale, offset = [model], 1.0, 0.0
    else:
        raise TypeError(f"cannot attribute a {type(model).__name__}")
    packed = getattr(model, "_shap_packed", None)
    if packed is None:
        packed = _Packed(trees)
        try:
            model._shap_packed = packed
        except AttributeError:
            pass
    return packed, scale, offset


def _model_output(model, X):
    packed, scale, offset = _ensemble_parts(model)
    if packed.offsets.shape[0] == 1:
        return np.full(X.shape[0], offset)
    return offset + scale * packed.sum(X)


def shap_values(model, X, background: BackgroundSet) -> tuple[np.ndarray, float]:
    """Interventional SHAP values for every row of ``X``; returns (phi, base_value)."""
    X = np.ascontiguousarray(np.atleast_2d(np.asarray(X, dtype=np.float64)))
    if background is None or background.k == 0:
        raise ValueError("empty background")
    R = np.ascontiguousarray(background.centroids)
    if R.shape[1] != X.shape[1]:
        raise ValueError(f"background has {R.shape[1]} features, query has {X.shape[1]}")
    packed, scale, offset = _ensemble_parts(model)
    base = float(np.dot(background.weights, _model_output(model, R)))
    if packed.offsets.shape[0] == 1:
        return np.zeros_like(X), base
    wx, wr = _weight_tables(X.shape[1])
    phi = _kernels.interventional_shap(
        X, R, background.weights, packed.offsets, packed.feature, packed.threshold,
        packed.left, packed.right, packed.value, wx, wr,
    )
    return phi * scale, base


def tree_shap_interventional(model, x, background: BackgroundSet) -> tuple[np.ndarray, float]:
    phi, base = shap_values(model, np.asarray(x, dtype=np.float64).reshape(1, -1), background)
    return phi[0], base


@dataclass(eq=False)
class ShapMatrix:
    base_value: float
    phi: np.ndarray
    predictions: np.ndarray
    feature_names: list
    features: np.ndarray | None = None
    mask: np.ndarray | None = None
    header: GridHeader | None = None
    max_efficiency_error: float = 0.0

    @property
    def n_pixels(self) -> int:
        return int(self.phi.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.phi[:, self.feature_names.index(name)]


def explain_rows(model, X, background: BackgroundSet, feature_names: Sequence[str], chunk_size: int = 4096) -> ShapMatrix:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    phi = np.zeros((n, d))
    pred = np.zeros(n)
    base = float(np.dot(background.weights, _model_output(model, background.centroids)))
    worst = 0.0
    step = max(1, int(chunk_size))
    for s in range(0, n, step):
        xs = X[s:s + step]
        p, _ = shap_values(model, xs, background)
        f = _model_output(model, xs)
        err = float(np.max(np.abs(base + p.sum(1) - f))) if len(xs) else 0.0
        if err >= EFFICIENCY_TOL:
            raise NumericFailure(f"SHAP efficiency residual {err:.3g} exceeds {EFFICIENCY_TOL}")
        worst = max(worst, err)
        phi[s:s + step] = p
        pred[s:s + step] = f
    return ShapMatrix(base, phi, pred, list(feature_names), X, max_efficiency_error=worst)


def explain_region(model, stack: FeatureStack, background: BackgroundSet, chunk_size: int = 4096,
                   feature_names: Sequence[str] | None = None, region_mask: np.ndarray | None = None) -> ShapMatrix:
    """Per-pixel attributions for every jointly valid pixel (row-major order)."""
    names = list(feature_names or getattr(model, "feature_names", None) or stack.names)
    sub = stack.subset(names)
    mask = sub.joint_valid_mask
    if region_mask is not None:
        mask = mask & region_mask
    X = sub.matrix(names, mask)
    if X.shape[0] == 0:
        return ShapMatrix(float(np.dot(background.weights, _model_output(model, background.centroids))),
                          np.zeros((0, len(names))), np.zeros(0), names, X, mask, stack.header)
    out = explain_rows(model, X, background, names, chunk_size)
    out.mask = mask
    out.header = stack.header
    return out


# ---------------------------------------------------------------------------
# summaries


def rank_features(shap: ShapMatrix) -> list[tuple[str, float, float]]:
    """(feature, mean |phi|, mean phi), strongest first; ties alphabetical."""
    if shap.n_pixels == 0:
        raise ValueError("empty SHAP matrix")
    mabs = np.abs(shap.phi).mean(0)
    msig = shap.phi.mean(0)
    rows = [(n, float(a), float(s)) for n, a, s in zip(shap.feature_names, mabs, msig)]
    return sorted(rows, key=lambda r: (-r[1], r[0]))


def importance_shares(shap: ShapMatrix) -> dict:
    """Two share conventions: of total mean |SHAP|, and of pixels where the feature dominates."""
    mabs = np.abs(shap.phi).mean(0)
    total = mabs.sum()
    dominant = np.bincount(np.argmax(np.abs(shap.phi), axis=1), minlength=len(shap.feature_names))
    return {
        name: {
            "share_of_abs_shap": float(mabs[i] / total) if total > 0 else 0.0,
            "share_of_pixels": float(dominant[i] / shap.n_pixels) if shap.n_pixels else 0.0,
        }
        for i, name in enumerate(shap.feature_names)
    }


@dataclass(frozen=True)
class PairwiseJointSummary:
    pair: tuple
    mu_all: float
    mu_hh: float
    cooling_coverage: float
    sd_all: float
    n_pixels: int
    n_joint_high: int
    joint_high_quantile: float
    mu_hh_defined: bool = True

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["pair"] = list(self.pair)
        d["mu_hh"] = self.mu_hh if self.mu_hh_defined else None
        return d


def _feature_values(shap: ShapMatrix, values, name: str) -> np.ndarray:
    if isinstance(values, FeatureStack):
        if shap.mask is None:
            raise GridError("SHAP matrix carries no pixel mask to index the stack")
        return values[name].values[shap.mask]
    if values is None:
        return shap.features[:, shap.feature_names.index(name)]
    return np.asarray(values[name], dtype=np.float64)


def pairwise_joint_summary(shap: ShapMatrix, values, pair: Sequence[str],
                           joint_high_quantile: float = 0.75) -> PairwiseJointSummary:
    """Net SHAP of a feature pair over the domain and over its joint-high pixels.

    ``values`` supplies raw feature values: a FeatureStack, a name -> array
    mapping, or None to use the values stored on the matrix.
    """
    a, b = pair
    for name in pair:
        if name not in shap.feature_names:
            raise KeyError(f"{name} not in SHAP matrix")
    net = shap.column(a) + shap.column(b)
    if net.size == 0:
        raise ValueError("empty SHAP matrix")
    va = _feature_values(shap, values, a)
    vb = _feature_values(shap, values, b)
    hh = (va >= np.quantile(va, joint_high_quantile)) & (vb >= np.quantile(vb, joint_high_quantile))
    n_hh = int(hh.sum())
    return PairwiseJointSummary(
        pair=(a, b),
        mu_all=float(net.mean()),
        mu_hh=float(net[hh].mean()) if n_hh else float("nan"),
        cooling_coverage=100.0 * float(np.count_nonzero(net < 0)) / net.size,
        sd_all=float(net.std()),
        n_pixels=int(net.size),
        n_joint_high=n_hh,
        joint_high_quantile=joint_high_quantile,
        mu_hh_defined=bool(n_hh),
    )


# ---------------------------------------------------------------------------
# file output: one float32 plane per feature plus a prediction plane


def write_shap(shap: ShapMatrix, path) -> Path:
    if shap.header is None or shap.mask is None:
        raise GridError("only region SHAP matrices (with header and mask) can be written as planes")
    stem = Path(path)
    stem = stem.with_suffix("") if stem.suffix in (".json", ".f32") else stem
    stem.parent.mkdir(parents=True, exist_ok=True)
    h = shap.header
    bands = list(shap.feature_names) + ["prediction"]
    planes = np.full((len(bands), h.rows, h.cols), np.nan, dtype="<f4")
    for i in range(len(shap.feature_names)):
        planes[i][shap.mask] = shap.phi[:, i]
    planes[-1][shap.mask] = shap.predictions
    stem.with_suffix(".f32").write_bytes(planes.tobytes(order="C"))
    meta = {
        "header": h.to_dict(),
        "bands": bands,
        "feature_names": list(shap.feature_names),
        "base_value": shap.base_value,
        "n_pixels": shap.n_pixels,
        "efficiency_max_abs_error": shap.max_efficiency_error,
        "ranking": [{"feature": f, "mean_abs": a, "mean_signed": s} for f, a, s in rank_features(shap)]
        if shap.n_pixels else [],
        "shares": importance_shares(shap) if shap.n_pixels else {},
    }
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))
    return stem


def read_shap(path) -> ShapMatrix:
    stem = Path(path)
    stem = stem.with_suffix("") if stem.suffix in (".json", ".f32") else stem
    meta = json.loads(stem.with_suffix(".json").read_text())
    h = GridHeader(**meta["header"])
    raw = stem.with_suffix(".f32").read_bytes()
    nb = len(meta["bands"])
    if len(raw) != nb * h.size * 4:
        raise GridError(f"{stem}.f32 holds {len(raw)} bytes, expected {nb * h.size * 4}")
    planes = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(nb, h.rows, h.cols)
    mask = np.isfinite(planes[-1])
    phi = np.column_stack([planes[i][mask] for i in range(nb - 1)])
    return ShapMatrix(float(meta["base_value"]), phi, planes[-1][mask], list(meta["feature_names"]), None, mask, h,
                      float(meta.get("efficiency_max_abs_error", 0.0)))
