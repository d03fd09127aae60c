"""Regression trees, a mean-structure random forest and a quantile gradient-boosting model.

All learners share one exact CART grower (variance-reduction splits at
midpoints between consecutive distinct values). Models are plain dataclasses
that serialize to a JSON document; see ``docs/model_schema.md``.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels

SCHEMA_VERSION = 1


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class TrainParams:
    seed: int = 0
    min_samples_leaf: int | None = None
    max_depth: int | None = None
    early_stop_patience: int = 10
    early_stop_tol: float = 1e-4

    def __post_init__(self):
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.early_stop_tol < 0:
            raise ValueError("early_stop_tol must be >= 0")


@dataclass(eq=False)
class DecisionTree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    max_depth_used: int = 0

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def predict(self, X) -> np.ndarray:
        X = _as_matrix(X)
        return _kernels.predict_tree(X, self.feature, self.threshold, self.left, self.right, self.value)

    def to_dict(self) -> dict:
        nodes = [
            [int(f), float(t), int(l), int(r), float(v), int(n)]
            for f, t, l, r, v, n in zip(self.feature, self.threshold, self.left, self.right, self.value, self.n_samples)
        ]
        return {"max_depth_used": int(self.max_depth_used), "nodes": nodes}

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        nodes = d["nodes"]
        cols = list(zip(*nodes)) if nodes else [()] * 6
        return cls(
            feature=np.asarray(cols[0], dtype=np.int64),
            threshold=np.asarray(cols[1], dtype=np.float64),
            left=np.asarray(cols[2], dtype=np.int64),
            right=np.asarray(cols[3], dtype=np.int64),
            value=np.asarray(cols[4], dtype=np.float64),
            n_samples=np.asarray(cols[5], dtype=np.int64),
            max_depth_used=int(d.get("max_depth_used", 0)),
        )


def _as_matrix(X) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    return X


def _check_xy(X, y):
    X = _as_matrix(X)
    y = np.ascontiguousarray(y, dtype=np.float64).ravel()
    if X.shape[0] == 0:
        raise FitError("cannot fit on an empty table")
    if X.shape[0] != y.shape[0]:
        raise FitError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise FitError("X and y must not contain NaN or inf")
    return X, y


def _grow(X, y_split, y_leaf, idx, max_features, min_samples_leaf, max_depth, leaf_tau, seed) -> DecisionTree:
    f, t, l, r, v, n, depth = _kernels.build_tree(
        X,
        y_split,
        y_leaf,
        np.array(idx, dtype=np.int64),
        int(max_features),
        int(min_samples_leaf),
        -1 if max_depth is None else int(max_depth),
        float(leaf_tau),
        np.uint64(seed),
    )
    return DecisionTree(f, t, l, r, v, n, int(depth))


def fit_cart(X, y, params: TrainParams | None = None, leaf_statistic: str = "mean", tau: float = 0.9) -> DecisionTree:
    """Fit a single CART regression tree using every feature at every node.

    ``leaf_statistic`` is ``"mean"`` or ``"quantile"`` (leaf value is then the
    ``tau``-quantile of the leaf's targets).
    """
    params = params or TrainParams()
    X, y = _check_xy(X, y)
    if leaf_statistic not in ("mean", "quantile"):
        raise ValueError(f"unknown leaf statistic {leaf_statistic!r}")
    leaf_tau = -1.0 if leaf_statistic == "mean" else float(tau)
    msl = params.min_samples_leaf or 1
    return _grow(X, y, y, np.arange(X.shape[0]), X.shape[1], msl, params.max_depth, leaf_tau, params.seed)


# ---------------------------------------------------------------------------
# packed ensembles for fast prediction


class _Packed:
    def __init__(self, trees: Sequence[DecisionTree]):
        sizes = [t.n_nodes for t in trees]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        cat = lambda name, dt: (
            np.concatenate([getattr(t, name) for t in trees]).astype(dt) if trees else np.empty(0, dtype=dt)
        )
        self.feature = cat("feature", np.int64)
        self.threshold = cat("threshold", np.float64)
        self.left = cat("left", np.int64)
        self.right = cat("right", np.int64)
        self.value = cat("value", np.float64)

    def sum(self, X) -> np.ndarray:
        return _kernels.predict_packed(X, self.offsets, self.feature, self.threshold, self.left, self.right, self.value)


# ---------------------------------------------------------------------------
# random forest


@dataclass(eq=False)
class ForestModel:
    trees: list
    seeds: list
    feature_names: list = field(default_factory=list)
    max_features: int = 1
    params: dict = field(default_factory=dict)
    oob_r2: float | None = None
    _packed: _Packed | None = field(default=None, repr=False)

    model_type = "random_forest"

    @property
    def n_estimators(self) -> int:
        return len(self.trees)

    @property
    def n_features(self) -> int:
        return len(self.feature_names) if self.feature_names else int(self.params.get("n_features", 0))

    def predict(self, X) -> np.ndarray:
        X = _as_matrix(X)
        _check_width(self, X)
        if self._packed is None:
            self._packed = _Packed(self.trees)
        return self._packed.sum(X) / len(self.trees)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model_type": self.model_type,
            "params": dict(self.params, max_features=self.max_features, n_estimators=self.n_estimators),
            "feature_names": list(self.feature_names),
            "seeds": [int(s) for s in self.seeds],
            "oob_r2": self.oob_r2,
            "trees": [t.to_dict() for t in self.trees],
        }


def _check_width(model, X):
    n = model.n_features
    if n and X.shape[1] != n:
        raise ValueError(f"model expects {n} features, got {X.shape[1]}")


def max_features_sqrt(d: int) -> int:
    return max(1, math.ceil(math.sqrt(d)))


def fit_random_forest(
    X,
    y,
    params: TrainParams | None = None,
    n_estimators: int = 150,
    max_features: int | str | None = "sqrt",
    feature_names: Sequence[str] | None = None,
    n_jobs: int = 1,
) -> ForestModel:
    """Bagged CART forest for the conditional mean.

    Each tree sees a bootstrap resample of all rows and draws ``max_features``
    candidate features per node without replacement (``"sqrt"`` means
    ceil(sqrt(d))). No depth cap unless ``params.max_depth`` is set. The
    out-of-bag R^2 is stored on the model.
    """
    params = params or TrainParams()
    X, y = _check_xy(X, y)
    n, d = X.shape
    if max_features == "sqrt":
        mtry = max_features_sqrt(d)
    elif max_features is None:
        mtry = d
    else:
        mtry = int(max_features)
    if not 1 <= mtry <= d:
        raise ValueError(f"max_features must be in [1, {d}], got {mtry}")
    msl = params.min_samples_leaf or 1

    seq = np.random.SeedSequence(params.seed)
    seeds = [int(s.generate_state(1, dtype=np.uint64)[0]) for s in seq.spawn(n_estimators)]

    def one(seed):
        rng = np.random.default_rng(seed)
        boot = rng.integers(0, n, n)
        tree = _grow(X, y, y, boot, mtry, msl, params.max_depth, -1.0, seed)
        return tree, boot

    if n_jobs == 1:
        results = [one(s) for s in seeds]
    else:
        with ThreadPoolExecutor(max_workers=None if n_jobs < 0 else n_jobs) as ex:
            results = list(ex.map(one, seeds))

    trees = [t for t, _ in results]
    oob_sum = np.zeros(n)
    oob_cnt = np.zeros(n)
    for tree, boot in results:
        out = np.ones(n, dtype=bool)
        out[boot] = False
        if out.any():
            oob_sum[out] += tree.predict(X[out])
            oob_cnt[out] += 1
    seen = oob_cnt > 0
    oob_r2 = None
    if seen.sum() >= 2:
        pred = oob_sum[seen] / oob_cnt[seen]
        ss_tot = float(np.sum((y[seen] - y[seen].mean()) ** 2))
        if ss_tot > 0:
            oob_r2 = 1.0 - float(np.sum((y[seen] - pred) ** 2)) / ss_tot

    return ForestModel(
        trees=trees,
        seeds=seeds,
        feature_names=list(feature_names) if feature_names is not None else [],
        max_features=mtry,
        params={
            "seed": params.seed,
            "min_samples_leaf": msl,
            "max_depth": params.max_depth,
            "n_features": d,
            "bootstrap": True,
        },
        oob_r2=oob_r2,
    )


# ---------------------------------------------------------------------------
# quantile gradient boosting


def pinball_loss(y, pred, tau: float):
    """Pinball (quantile) loss, elementwise."""
    y = np.asarray(y, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    diff = y - pred
    out = np.where(diff >= 0, tau * diff, (tau - 1.0) * diff)
    return out if out.ndim else float(out)


def negative_gradient(y, pred, tau: float):
    y = np.asarray(y, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    out = np.where(y > pred, tau, np.where(y < pred, tau - 1.0, 0.0))
    return out if out.ndim else float(out)


@dataclass(eq=False)
class GbmModel:
    init_value: float
    trees: list
    learning_rate: float = 0.05
    tau: float = 0.9
    feature_names: list = field(default_factory=list)
    params: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    stages_fit: int = 0
    _packed: _Packed | None = field(default=None, repr=False)

    model_type = "gbm_quantile"

    @property
    def stages_used(self) -> int:
        return len(self.trees)

    @property
    def n_features(self) -> int:
        return len(self.feature_names) if self.feature_names else int(self.params.get("n_features", 0))

    def predict(self, X) -> np.ndarray:
        X = _as_matrix(X)
        _check_width(self, X)
        if not self.trees:
            return np.full(X.shape[0], self.init_value)
        if self._packed is None:
            self._packed = _Packed(self.trees)
        return self.init_value + self.learning_rate * self._packed.sum(X)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "model_type": self.model_type,
            "params": dict(self.params, learning_rate=self.learning_rate, tau=self.tau),
            "init_value": self.init_value,
            "feature_names": list(self.feature_names),
            "seeds": [int(s) for s in self.seeds],
            "stages_used": self.stages_used,
            "stages_fit": self.stages_fit,
            "train_loss": list(self.train_loss),
            "valid_loss": list(self.valid_loss),
            "trees": [t.to_dict() for t in self.trees],
        }


def fit_gbm_quantile(
    X,
    y,
    params: TrainParams | None = None,
    tau: float = 0.9,
    learning_rate: float = 0.05,
    max_depth: int = 5,
    n_estimators: int = 1000,
    validation_fraction: float = 0.1,
    feature_names: Sequence[str] | None = None,
) -> GbmModel:
    """Gradient boosting under pinball loss with validation early stopping.

    Each stage fits a depth-limited CART to the negative gradient and then sets
    every leaf to the ``tau``-quantile of the in-leaf residuals. Training stops
    once the validation loss has not improved by more than
    ``params.early_stop_tol`` for ``params.early_stop_patience`` stages; the
    returned model is truncated to the best validation stage.
    """
    params = params or TrainParams()
    X, y = _check_xy(X, y)
    n, d = X.shape
    if n < 20:
        raise FitError(f"quantile boosting needs >= 20 samples, got {n}")
    if not 0 < tau < 1:
        raise ValueError("tau must be in (0, 1)")
    n_val = int(math.ceil(validation_fraction * n))
    if n_val < 1 or n - n_val < 1:
        raise FitError("degenerate validation split")
    rng = np.random.default_rng(params.seed)
    perm = rng.permutation(n)
    val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    Xt, yt, Xv, yv = X[tr], y[tr], X[val], y[val]
    msl = params.min_samples_leaf or 5

    init = float(np.quantile(yt, tau))
    Ft = np.full(yt.shape[0], init)
    Fv = np.full(yv.shape[0], init)
    train_loss = [float(np.mean(pinball_loss(yt, Ft, tau)))]
    valid_loss = [float(np.mean(pinball_loss(yv, Fv, tau)))]
    best, best_stage, stale = valid_loss[0], 0, 0
    trees: list = []
    all_idx = np.arange(yt.shape[0])

    for stage in range(n_estimators):
        resid = yt - Ft
        if not np.any(resid):
            break
        grad = negative_gradient(yt, Ft, tau)
        tree = _grow(Xt, grad, resid, all_idx, d, msl, max_depth, tau, params.seed + stage)
        trees.append(tree)
        Ft = Ft + learning_rate * tree.predict(Xt)
        Fv = Fv + learning_rate * tree.predict(Xv)
        train_loss.append(float(np.mean(pinball_loss(yt, Ft, tau))))
        vl = float(np.mean(pinball_loss(yv, Fv, tau)))
        valid_loss.append(vl)
        if vl < best - params.early_stop_tol:
            best, best_stage, stale = vl, stage + 1, 0
        else:
            stale += 1
            if stale >= params.early_stop_patience:
                break

    return GbmModel(
        init_value=init,
        trees=trees[:best_stage],
        learning_rate=learning_rate,
        tau=tau,
        feature_names=list(feature_names) if feature_names is not None else [],
        params={
            "seed": params.seed,
            "min_samples_leaf": msl,
            "max_depth": max_depth,
            "n_estimators": n_estimators,
            "validation_fraction": validation_fraction,
            "early_stop_patience": params.early_stop_patience,
            "early_stop_tol": params.early_stop_tol,
            "n_features": d,
        },
        seeds=[params.seed],
        train_loss=train_loss[: best_stage + 1],
        valid_loss=valid_loss[: best_stage + 1],
        stages_fit=len(trees),
    )


# ---------------------------------------------------------------------------
# tail oversampling


@dataclass(frozen=True)
class OversampleResult:
    X: np.ndarray
    y: np.ndarray
    threshold: float
    n_extreme_before: int
    n_added: int
    used_replacement: bool
    no_extremes: bool = False


def oversample_tail(X, y, quantile_level: float = 0.90, target_fraction: float = 0.30, seed: int = 0) -> OversampleResult:
    """Duplicate rows with ``y >= quantile(y, quantile_level)`` until they form ``target_fraction`` of the table.

    Extra copies are drawn without replacement from the extreme pool first and
    with replacement only once that pool is exhausted. Original rows keep
    their order; copies are appended.
    """
    if not 0 < target_fraction < 1:
        raise ValueError("target_fraction must be in (0, 1)")
    X, y = _check_xy(X, y)
    thr = float(np.quantile(y, quantile_level))
    ext = np.flatnonzero(y >= thr)
    if np.all(y == y[0]) or ext.size == 0:
        return OversampleResult(X, y, thr, int(ext.size), 0, False, no_extremes=True)
    n_ext, n_rest = ext.size, y.size - ext.size
    if n_ext / y.size >= target_fraction:
        return OversampleResult(X, y, thr, n_ext, 0, False)
    want = int(math.floor(target_fraction * n_rest / (1.0 - target_fraction) + 0.5))
    extra = want - n_ext
    if extra <= 0:
        return OversampleResult(X, y, thr, n_ext, 0, False)
    rng = np.random.default_rng(seed)
    first = rng.choice(ext, size=min(extra, n_ext), replace=False)
    rest = rng.choice(ext, size=extra - first.size, replace=True) if extra > n_ext else np.empty(0, dtype=np.int64)
    add = np.concatenate([first, rest]).astype(np.int64)
    return OversampleResult(
        np.vstack([X, X[add]]), np.concatenate([y, y[add]]), thr, n_ext, int(add.size), bool(rest.size)
    )


# ---------------------------------------------------------------------------
# prediction and serialization


def predict(model, X) -> np.ndarray:
    return model.predict(X)


def model_to_json(model) -> str:
    return json.dumps(model.to_dict(), separators=(",", ":"))


def model_from_dict(d: dict):
    kind = d.get("model_type")
    trees = [DecisionTree.from_dict(t) for t in d.get("trees", [])]
    p = dict(d.get("params", {}))
    if kind == "random_forest":
        return ForestModel(
            trees=trees,
            seeds=list(d.get("seeds", [])),
            feature_names=list(d.get("feature_names", [])),
            max_features=int(p.pop("max_features", 1)),
            params={k: v for k, v in p.items() if k != "n_estimators"},
            oob_r2=d.get("oob_r2"),
        )
    if kind == "gbm_quantile":
        lr = float(p.pop("learning_rate", 0.05))
        tau = float(p.pop("tau", 0.9))
        return GbmModel(
            init_value=float(d["init_value"]),
            trees=trees,
            learning_rate=lr,
            tau=tau,
            feature_names=list(d.get("feature_names", [])),
            params=p,
            seeds=list(d.get("seeds", [])),
            train_loss=list(d.get("train_loss", [])),
            valid_loss=list(d.get("valid_loss", [])),
            stages_fit=int(d.get("stages_fit", len(trees))),
        )
    raise ValueError(f"unknown model_type {kind!r}")


def save_model(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model_to_json(model))
    return path


def load_model(path):
    return model_from_dict(json.loads(Path(path).read_text()))
