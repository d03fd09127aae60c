"""Year-wise HI downscaling: training tables, split, RF + Q90 learners, max-ensemble, metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .grid import FeatureStack, Grid, GridError, NormalizationRecord
from .trees import (
    ForestModel,
    GbmModel,
    TrainParams,
    fit_gbm_quantile,
    fit_random_forest,
    model_from_dict,
    oversample_tail,
)

DOWNSCALING_LAYERS = ("LST", "WSA", "POP", "RAD", "DPT", "IMP", "DCOAST", "LAT", "LON")


@dataclass(eq=False)
class TrainingTable:
    X: np.ndarray
    y: np.ndarray
    feature_names: list
    pixel_index: np.ndarray  # flat row-major pixel index of each row

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def take(self, rows) -> "TrainingTable":
        return TrainingTable(self.X[rows], self.y[rows], self.feature_names, self.pixel_index[rows])


def make_training_table(stack: FeatureStack, target: Grid, feature_names: Sequence[str] | None = None) -> TrainingTable:
    """One row per pixel valid in every stack layer and in the target, row-major."""
    if target.header != stack.header:
        raise GridError("target grid is not aligned with the predictor stack")
    names = list(feature_names or stack.names)
    sub = stack.subset(names)
    mask = sub.joint_valid_mask & target.valid_mask
    if not mask.any():
        raise GridError("no pixel is valid in both the stack and the target")
    return TrainingTable(sub.matrix(names, mask), target.values[mask], names, np.flatnonzero(mask.ravel()))


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.70
    seed: int = 7

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")


def split_train_test(table: TrainingTable, spec: SplitSpec = SplitSpec()) -> tuple[TrainingTable, TrainingTable]:
    n = len(table)
    if n < 10:
        raise ValueError(f"need at least 10 rows to split, got {n}")
    n_train = int(math.floor(spec.train_fraction * n + 0.5))
    perm = np.random.default_rng(spec.seed).permutation(n)
    return table.take(np.sort(perm[:n_train])), table.take(np.sort(perm[n_train:]))


@dataclass(frozen=True)
class EvalReport:
    n: int
    r: float
    mae: float
    rmse: float
    bias: float
    r2: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("r", "r2"):
            if isinstance(d[k], float) and math.isnan(d[k]):
                d[k] = None
        return d


def evaluate(pred, obs) -> EvalReport:
    """Pearson r, MAE, RMSE, mean bias (pred - obs) and R^2."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    o = np.asarray(obs, dtype=np.float64).ravel()
    if p.size != o.size:
        raise ValueError("prediction and observation lengths differ")
    if p.size < 2:
        raise ValueError("evaluation needs at least 2 pairs")
    err = p - o
    mae = float(np.mean(np.abs(err)))
    rmse = float(math.sqrt(np.mean(err ** 2)))
    bias = float(np.mean(err))
    ss_tot = float(np.sum((o - o.mean()) ** 2))
    if ss_tot == 0.0:
        return EvalReport(int(p.size), float("nan"), mae, rmse, bias, float("nan"), degenerate=True)
    r2 = 1.0 - float(np.sum(err ** 2)) / ss_tot
    sp = float(np.sqrt(np.sum((p - p.mean()) ** 2)))
    r = float(np.sum((p - p.mean()) * (o - o.mean())) / (sp * math.sqrt(ss_tot))) if sp > 0 else float("nan")
    return EvalReport(int(p.size), r, mae, rmse, bias, r2, degenerate=sp == 0)


@dataclass(frozen=True)
class DownscaleParams:
    """Hyperparameters of both learners plus the tail-oversampling rule."""

    seed: int = 7
    split: SplitSpec = SplitSpec()
    rf_n_estimators: int = 150
    rf_min_samples_leaf: int = 1
    rf_max_depth: int | None = None
    gbm_tau: float = 0.90
    gbm_learning_rate: float = 0.05
    gbm_max_depth: int = 5
    gbm_n_estimators: int = 1000
    gbm_min_samples_leaf: int = 5
    gbm_validation_fraction: float = 0.1
    early_stop_patience: int = 10
    early_stop_tol: float = 1e-4
    tail_quantile: float = 0.90
    tail_fraction: float = 0.30
    normalize: bool = True

    @classmethod
    def from_dict(cls, d: dict | None) -> "DownscaleParams":
        d = dict(d or {})
        if "split" in d and isinstance(d["split"], dict):
            d["split"] = SplitSpec(**d["split"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class EnsembleModel:
    rf: ForestModel
    q90: GbmModel
    feature_names: list
    year: int | None = None
    normalization: list = field(default_factory=list)
    oversampling: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def transform(self, X: np.ndarray) -> np.ndarray:
        if not self.normalization:
            return X
        return np.column_stack([rec.apply(X[:, i]) for i, rec in enumerate(self.normalization)])

    def predict_parts(self, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        Z = self.transform(np.asarray(X, dtype=np.float64))
        rf = self.rf.predict(Z)
        q = self.q90.predict(Z)
        return rf, q, np.maximum(rf, q)

    def predict(self, X) -> np.ndarray:
        return self.predict_parts(X)[2]

    def manifest(self) -> dict:
        return {
            "year": self.year,
            "feature_names": list(self.feature_names),
            "rf_seeds": [int(s) for s in self.rf.seeds],
            "rf_n_estimators": self.rf.n_estimators,
            "rf_oob_r2": self.rf.oob_r2,
            "q90_seed": self.q90.params.get("seed"),
            "q90_stages_used": self.q90.stages_used,
            "q90_stages_fit": self.q90.stages_fit,
            "q90_init_value": self.q90.init_value,
            "normalization": [r.to_dict() for r in self.normalization],
            "oversampling": dict(self.oversampling),
            "params": dict(self.params),
        }

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "rf.json").write_text(json.dumps(self.rf.to_dict(), separators=(",", ":")))
        (d / "q90.json").write_text(json.dumps(self.q90.to_dict(), separators=(",", ":")))
        (d / "ensemble.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory) -> "EnsembleModel":
        d = Path(directory)
        meta = json.loads((d / "ensemble.json").read_text())
        return cls(
            rf=model_from_dict(json.loads((d / "rf.json").read_text())),
            q90=model_from_dict(json.loads((d / "q90.json").read_text())),
            feature_names=meta["feature_names"],
            year=meta.get("year"),
            normalization=[NormalizationRecord.from_dict(r) for r in meta.get("normalization", [])],
            oversampling=meta.get("oversampling", {}),
            params=meta.get("params", {}),
        )


def fit_normalization(X: np.ndarray, names: Sequence[str], year: int | None = None,
                      season: str = "MAM") -> list[NormalizationRecord]:
    """Per-feature z-score records fit on training rows; constant columns keep unit scale."""
    recs = []
    for i, name in enumerate(names):
        col = X[:, i]
        sd = float(col.std())
        recs.append(NormalizationRecord(name, float(col.mean()), sd if sd > 0 else 1.0, year, season))
    return recs


def train_year(train: TrainingTable, params: DownscaleParams = DownscaleParams(), year: int | None = None) -> EnsembleModel:
    """Fit the mean-structure forest and the tail-oversampled quantile booster on one year's training rows."""
    norm = fit_normalization(train.X, train.feature_names, year) if params.normalize else []
    Z = np.column_stack([r.apply(train.X[:, i]) for i, r in enumerate(norm)]) if norm else train.X
    rf = fit_random_forest(
        Z,
        train.y,
        TrainParams(seed=params.seed, min_samples_leaf=params.rf_min_samples_leaf, max_depth=params.rf_max_depth),
        n_estimators=params.rf_n_estimators,
        max_features="sqrt",
        feature_names=train.feature_names,
    )
    over = oversample_tail(Z, train.y, params.tail_quantile, params.tail_fraction, seed=params.seed)
    q90 = fit_gbm_quantile(
        over.X,
        over.y,
        TrainParams(
            seed=params.seed,
            min_samples_leaf=params.gbm_min_samples_leaf,
            early_stop_patience=params.early_stop_patience,
            early_stop_tol=params.early_stop_tol,
        ),
        tau=params.gbm_tau,
        learning_rate=params.gbm_learning_rate,
        max_depth=params.gbm_max_depth,
        n_estimators=params.gbm_n_estimators,
        validation_fraction=params.gbm_validation_fraction,
        feature_names=train.feature_names,
    )
    return EnsembleModel(
        rf=rf,
        q90=q90,
        feature_names=list(train.feature_names),
        year=year,
        normalization=norm,
        oversampling={
            "threshold": over.threshold,
            "n_extreme_before": over.n_extreme_before,
            "n_added": over.n_added,
            "used_replacement": over.used_replacement,
            "no_extremes": over.no_extremes,
            "rows_after": int(over.y.shape[0]),
        },
        params=params.to_dict(),
    )


@dataclass(eq=False)
class EnsemblePrediction:
    ensemble: Grid
    rf: Grid
    q90: Grid


def predict_ensemble(model: EnsembleModel, stack: FeatureStack) -> EnsemblePrediction:
    """Pixelwise max of the RF and Q90 predictions on every jointly valid pixel."""
    if list(stack.names) != list(model.feature_names):
        raise GridError(f"stack layers {stack.names} do not match model features {model.feature_names} in name and order")
    mask = stack.joint_valid_mask
    X = stack.matrix(model.feature_names, mask)
    h = stack.header
    outs = [np.full(h.shape, np.nan) for _ in range(3)]
    if X.shape[0]:
        rf, q, ens = model.predict_parts(X)
        for o, v in zip(outs, (ens, rf, q)):
            o[mask] = v
    return EnsemblePrediction(*(Grid(h, o, "degC") for o in outs))


def tail_bias(pred, obs, quantile: float = 0.9) -> float:
    """Mean bias over pixels whose observed value is in the top (1 - quantile) fraction."""
    p = np.asarray(pred, dtype=np.float64)
    o = np.asarray(obs, dtype=np.float64)
    top = o >= np.quantile(o, quantile)
    return float(np.mean(p[top] - o[top]))
