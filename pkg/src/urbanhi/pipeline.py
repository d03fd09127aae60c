"""Configuration, staged orchestration with manifests, and station validation.

Every stage writes into its own directory under the output root and finishes
with a ``manifest.json`` listing the config hash, seeds, library versions and
sha256 digests of every input it read and every file it wrote. Stages talk to
each other only through those files.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import itertools
import json
import logging
import math
import os
import platform
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import jsonschema
import numpy as np

from . import __version__
from .downscale import (
    DOWNSCALING_LAYERS,
    DownscaleParams,
    EnsembleModel,
    EvalReport,
    evaluate,
    make_training_table,
    predict_ensemble,
    split_train_test,
    tail_bias,
    train_year,
)
from .explain_ale import ale_1d, ale_2d, h2_interaction, select_strongest_pair, zero_crossing_isolines
from .explain_shap import (
    BackgroundSet,
    NumericFailure,
    compress_background,
    explain_region,
    fit_explainer,
    pairwise_joint_summary,
    rank_features,
    read_shap,
    write_shap,
)
from .grid import FeatureStack, Grid, GridError, ZeroVarianceError, align_stack, read_categorical, read_grid, write_grid
from .heat_index import TaggedField, heat_index_grid, month_number, seasonal_mam_aggregate
from .stats import block_bootstrap, effect_sizes, ks_two_sample, linear_trend
from .synth import SyntheticWorldSpec, StationRecord, generate_synthetic_world, read_stations, write_world
from .trees import TrainParams, load_model, save_model

log = logging.getLogger("urbanhi")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "URBANHI_OUTPUT_ROOT"

EXPLAIN_DEFAULTS = {
    "features": None,
    "rf_n_estimators": 150,
    "background_k": 64,
    "background_samples": 5000,
    "chunk_size": 4096,
    "joint_high_quantile": 0.75,
    "ale_bins_1d": 20,
    "ale_bins_2d": 10,
    "h2_features": ["EVI", "LAI", "FPAR", "NTL"],
    "h2_eval_sample_size": 200,
    "recent_years": 5,
    "min_tolerance": 0.02,
}
STATS_DEFAULTS = {"bootstrap_replicates": 1000, "bootstrap_level": 0.95}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code_for(cause)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exc.exit_code
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (NumericFailure, FloatingPointError, ZeroVarianceError, ArithmeticError)):
        return EXIT_NUMERIC
    return EXIT_DATA


# ---------------------------------------------------------------------------
# JSON helpers


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(obj, path) -> Path:
    """Deterministic JSON: sorted keys, NaN/inf written as null."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")
    return path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def library_versions() -> dict:
    import numba
    import scipy

    return {"urbanhi": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


# ---------------------------------------------------------------------------
# configuration


def load_schema() -> dict:
    return json.loads(resources.files("urbanhi").joinpath("config_schema.json").read_text())


@dataclass(eq=False)
class PipelineConfig:
    raw: dict
    base_dir: Path
    output_dir: Path
    seed: int = 7
    inputs: dict | None = None
    inputs_base: Path | None = None
    synthetic: SyntheticWorldSpec | None = None
    hi_mode: str = "mean"
    downscale: DownscaleParams = field(default_factory=DownscaleParams)
    explain: dict = field(default_factory=lambda: dict(EXPLAIN_DEFAULTS))
    stats: dict = field(default_factory=lambda: dict(STATS_DEFAULTS))

    @property
    def config_hash(self) -> str:
        # the output location is deliberately excluded so relocated reruns hash alike
        body = {k: v for k, v in self.raw.items() if k != "output_dir"}
        return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    @property
    def years(self) -> list[int]:
        if self.inputs is None:
            return list(self.synthetic.years) if self.synthetic else []
        return sorted(int(y) for y in self.inputs["years"])

    def input_path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else (self.inputs_base or self.base_dir) / p


def config_from_dict(d: Mapping, base_dir=".", output_root=None, check_paths: bool = True) -> PipelineConfig:
    d = copy.deepcopy(dict(d))
    try:
        jsonschema.validate(d, load_schema())
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {e.message}") from None
    base = Path(base_dir).resolve()
    out = output_root or os.environ.get(OUTPUT_ROOT_ENV) or d.get("output_dir") or "out"
    out = Path(out)
    if not out.is_absolute():
        out = base / out
    seed = int(d.get("seed", 7))
    ds = dict(d.get("downscale", {}))
    ds.setdefault("seed", seed)
    cfg = PipelineConfig(
        raw=d,
        base_dir=base,
        output_dir=out,
        seed=seed,
        inputs=d.get("inputs"),
        inputs_base=base if d.get("inputs") else None,
        synthetic=SyntheticWorldSpec.from_dict(d["synthetic"]) if "synthetic" in d else None,
        hi_mode=d.get("hi", {}).get("mode", "mean"),
        downscale=DownscaleParams.from_dict(ds),
        explain={**EXPLAIN_DEFAULTS, **d.get("explain", {})},
        stats={**STATS_DEFAULTS, **d.get("stats", {})},
    )
    if check_paths and cfg.inputs is not None:
        check_inputs(cfg)
    return cfg


def load_config(path, output_root=None, check_paths: bool = True) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    return config_from_dict(d, path.parent, output_root, check_paths)


def _referenced_paths(inputs: Mapping) -> list[tuple[str, str, bool]]:
    """(consuming stage, path, is_grid) for every path the inputs section names."""
    refs = []
    for y, spec in sorted(inputs["years"].items()):
        for f in spec["t_fields"] + spec["rh_fields"]:
            refs.append((f"hi[{y}]", f["path"], True))
        refs += [(f"downscale[{y}]", p, True) for p in spec["stack"].values()]
        refs += [("explain_shap", p, True) for p in spec["explain_stack"].values()]
    refs.append(("explain_shap", inputs["regions"], True))
    refs.append(("stats_ks", inputs["cities"], False))
    if inputs.get("stations"):
        refs.append(("validate", inputs["stations"], False))
    return refs


def check_inputs(cfg: PipelineConfig) -> None:
    for stage, rel, is_grid in _referenced_paths(cfg.inputs):
        p = cfg.input_path(rel)
        if not p.exists():
            raise ConfigError(f"stage '{stage}': input not found: {p}")
        if is_grid and not p.with_suffix(".json").exists():
            raise ConfigError(f"stage '{stage}': grid sidecar not found: {p.with_suffix('.json')}")
    for y, spec in cfg.inputs["years"].items():
        if len(spec["t_fields"]) != len(spec["rh_fields"]):
            raise ConfigError(f"year {y}: {len(spec['t_fields'])} temperature fields but "
                              f"{len(spec['rh_fields'])} humidity fields")
        missing = [n for n in DOWNSCALING_LAYERS if n not in spec["stack"]]
        if missing:
            raise ConfigError(f"year {y}: stack lacks mandatory layers {missing}")


# ---------------------------------------------------------------------------
# stage bookkeeping


class Stage:
    def __init__(self, pipeline: "Pipeline", name: str, subdir: str, seeds: dict | None = None,
                 params: dict | None = None):
        self.pipeline = pipeline
        self.name = name
        self.dir = pipeline.out / subdir
        self.seeds = {"config_seed": pipeline.cfg.seed, **(seeds or {})}
        self.params = params or {}
        self.inputs: set[Path] = set()

    def read(self, path, grid: bool = False) -> Path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"missing input {p}")
        self.inputs.add(p.resolve())
        if grid:
            side = p.with_suffix(".json")
            if not side.exists():
                raise FileNotFoundError(f"missing grid sidecar {side}")
            self.inputs.add(side.resolve())
        return p

    def grid(self, path) -> Grid:
        p = Path(path)
        p = p if p.suffix == ".f32" else p.with_suffix(".f32")
        return read_grid(self.read(p, grid=True))

    def categorical(self, path):
        p = Path(path)
        p = p if p.suffix == ".i16" else p.with_suffix(".i16")
        return read_categorical(self.read(p, grid=True))

    def json(self, path):
        return json.loads(self.read(path).read_text(encoding="utf-8"))

    def shap(self, stem):
        stem = Path(stem)
        self.read(stem.with_suffix(".f32"))
        self.read(stem.with_suffix(".json"))
        return read_shap(stem)

    def manifest(self) -> dict:
        rel = self.pipeline.relpath
        outputs = sorted(p for p in self.dir.rglob("*") if p.is_file() and p.name != "manifest.json")
        return {
            "stage": self.name,
            "config_hash": self.pipeline.cfg.config_hash,
            "seeds": self.seeds,
            "versions": library_versions(),
            "params": self.params,
            "inputs": [{"path": rel(p), "sha256": sha256_file(p)} for p in sorted(self.inputs, key=rel)],
            "outputs": [{"path": rel(p), "sha256": sha256_file(p)} for p in outputs],
        }


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = cfg.output_dir
        self.completed: list[tuple[str, Path]] = []

    def relpath(self, p: Path) -> str:
        p = Path(p).resolve()
        for root in (self.out.resolve(), self.cfg.base_dir):
            try:
                return p.relative_to(root).as_posix()
            except ValueError:
                continue
        return p.as_posix()

    @contextmanager
    def stage(self, name: str, subdir: str | None = None, seeds: dict | None = None, params: dict | None = None):
        st = Stage(self, name, subdir or name, seeds, params)
        log.info("stage %s: start", name)
        try:
            st.dir.mkdir(parents=True, exist_ok=True)
            old = st.dir / "manifest.json"
            if old.exists():
                old.unlink()
            yield st
            mpath = dump_json(st.manifest(), st.dir / "manifest.json")
        except StageError:
            raise
        except Exception as exc:  # every failure is reported with its stage
            raise StageError(name, exc) from exc
        self.completed.append((name, mpath))
        log.info("stage %s: done", name)

    # -- helpers ---------------------------------------------------------

    def _inputs(self) -> dict:
        if self.cfg.inputs is None:
            raise ConfigError("no inputs: run the synth stage or give an inputs section")
        return self.cfg.inputs

    def _year_spec(self, year: int) -> dict:
        spec = self._inputs()["years"].get(str(year))
        if spec is None:
            raise ConfigError(f"year {year} is not configured")
        return spec

    def _features(self) -> list[str]:
        feats = self.cfg.explain["features"]
        if feats:
            return list(feats)
        first = self._year_spec(self.cfg.years[0])
        return list(first["explain_stack"])

    def _explain_stack(self, st: Stage, year: int) -> FeatureStack:
        spec = self._year_spec(year)["explain_stack"]
        feats = self._features()
        missing = [f for f in feats if f not in spec]
        if missing:
            raise GridError(f"explanation layers {missing} missing for {year}")
        return align_stack({f: st.grid(self.cfg.input_path(spec[f])) for f in feats})

    def _regions(self, st: Stage):
        return st.categorical(self.cfg.input_path(self._inputs()["regions"]))

    def _cities(self, st: Stage) -> list[dict]:
        return st.json(self.cfg.input_path(self._inputs()["cities"]))

    def _pred(self, st: Stage, year: int) -> Grid:
        return st.grid(self.out / "downscale" / str(year) / "pred_ensemble.f32")

    def _shap_path(self, year: int) -> Path:
        return self.out / "explain_shap" / f"shap_{year}"

    # -- stages ----------------------------------------------------------

    def stage_synth(self) -> None:
        spec = self.cfg.synthetic
        with self.stage("synth", "inputs", seeds={"world_seed": spec.seed}, params=spec.to_dict()) as st:
            world = generate_synthetic_world(spec)
            self.cfg.inputs = write_world(world, st.dir)
            self.cfg.inputs_base = st.dir
            dump_json({"inputs": self.cfg.inputs}, st.dir / "inputs.json")
        check_inputs(self.cfg)

    def stage_hi(self, year: int) -> None:
        spec = self._year_spec(year)
        with self.stage(f"hi[{year}]", f"hi/{year}", params={"mode": self.cfg.hi_mode}) as st:
            fields = []
            for tf, rf in zip(spec["t_fields"], spec["rh_fields"]):
                if month_number(tf["month"]) != month_number(rf["month"]):
                    raise GridError(f"month mismatch between {tf['path']} and {rf['path']}")
                t = st.grid(self.cfg.input_path(tf["path"]))
                rh = st.grid(self.cfg.input_path(rf["path"]))
                fields.append(TaggedField(heat_index_grid(t, rh), month_number(tf["month"]), tf.get("timestamp", "")))
            hi = seasonal_mam_aggregate(fields, self.cfg.hi_mode)
            write_grid(hi, st.dir / "hi_mam.f32")
            v = hi.values[hi.valid_mask]
            dump_json({"year": year, "mode": self.cfg.hi_mode, "n_fields": len(fields),
                       "valid_pixels": int(v.size), "mean": float(v.mean()) if v.size else None,
                       "std": float(v.std()) if v.size else None}, st.dir / "summary.json")

    def stage_downscale(self, year: int) -> None:
        p = self.cfg.downscale
        spec = self._year_spec(year)
        seeds = {"learner_seed": p.seed, "split_seed": p.split.seed}
        with self.stage(f"downscale[{year}]", f"downscale/{year}", seeds=seeds, params=p.to_dict()) as st:
            target = st.grid(self.out / "hi" / str(year) / "hi_mam.f32")
            stack = align_stack({n: st.grid(self.cfg.input_path(path)) for n, path in spec["stack"].items()})
            table = make_training_table(stack, target)
            train, test = split_train_test(table, p.split)
            model = train_year(train, p, year)
            model.save(st.dir / "model")
            pred = predict_ensemble(model, stack)
            write_grid(pred.ensemble, st.dir / "pred_ensemble.f32")
            write_grid(pred.rf, st.dir / "pred_rf.f32")
            write_grid(pred.q90, st.dir / "pred_q90.f32")
            rf, q, ens = model.predict_parts(test.X)
            report = {
                "year": year,
                "n_train": len(train),
                "n_test": len(test),
                "ensemble": evaluate(ens, test.y).to_dict(),
                "rf": evaluate(rf, test.y).to_dict(),
                "q90": evaluate(q, test.y).to_dict(),
                "q90_coverage": float(np.mean(test.y <= q)),
                "tail_bias_top_decile": {"ensemble": tail_bias(ens, test.y), "rf": tail_bias(rf, test.y),
                                         "q90": tail_bias(q, test.y)},
                "q90_stages_used": model.q90.stages_used,
            }
            dump_json(report, st.dir / "eval.json")

    def _pooled(self, st: Stage):
        regions = self._regions(st)
        rows, ys, stacks, masks = [], [], {}, {}
        for year in self.cfg.years:
            stack = self._explain_stack(st, year)
            pred = self._pred(st, year)
            mask = (regions.codes > 0) & stack.joint_valid_mask & pred.valid_mask
            stacks[year], masks[year] = stack, mask
            rows.append(stack.matrix(self._features(), mask))
            ys.append(pred.values[mask])
        return np.vstack(rows), np.concatenate(ys), stacks, masks

    def stage_explain_shap(self) -> None:
        e = self.cfg.explain
        seed = self.cfg.seed
        params = {k: e[k] for k in ("rf_n_estimators", "background_k", "background_samples", "chunk_size")}
        with self.stage("explain_shap", seeds={"explainer_seed": seed, "background_seed": seed},
                        params={**params, "features": self._features()}) as st:
            feats = self._features()
            X, y, stacks, masks = self._pooled(st)
            if X.shape[0] < 2:
                raise GridError("fewer than 2 explainable pixels inside the city regions")
            model = fit_explainer(X, y, feats, TrainParams(seed=seed), n_estimators=e["rf_n_estimators"])
            save_model(model, st.dir / "explainer.json")
            rng = np.random.default_rng(seed)
            m = min(e["background_samples"], X.shape[0])
            idx = np.sort(rng.choice(X.shape[0], m, replace=False))
            bg = compress_background(X[idx], k=min(e["background_k"], m), seed=seed, feature_names=feats)
            dump_json(bg.to_dict(), st.dir / "background.json")
            summary = {"n_rows": int(X.shape[0]), "explainer_oob_r2": model.oob_r2, "background_k": bg.k,
                       "years": {}}
            for year in self.cfg.years:
                shap = explain_region(model, stacks[year], bg, e["chunk_size"], feats, masks[year])
                write_shap(shap, self._shap_path(year))
                summary["years"][str(year)] = {
                    "n_pixels": shap.n_pixels,
                    "base_value": shap.base_value,
                    "efficiency_max_abs_error": shap.max_efficiency_error,
                    "ranking": [{"feature": f, "mean_abs": a, "mean_signed": s} for f, a, s in rank_features(shap)],
                }
            dump_json(summary, st.dir / "summary.json")

    def stage_explain_pairs(self) -> None:
        q = self.cfg.explain["joint_high_quantile"]
        with self.stage("explain_pairs", params={"joint_high_quantile": q}) as st:
            feats = self._features()
            out = {"joint_high_quantile": q, "years": {}}
            for year in self.cfg.years:
                shap = st.shap(self._shap_path(year))
                stack = self._explain_stack(st, year)
                out["years"][str(year)] = [pairwise_joint_summary(shap, stack, pair, q).to_dict()
                                           for pair in itertools.combinations(feats, 2)]
            dump_json(out, st.dir / "pairs.json")

    def _year_rows(self, st: Stage, year: int) -> np.ndarray:
        shap = st.shap(self._shap_path(year))
        stack = self._explain_stack(st, year)
        return stack.matrix(self._features(), shap.mask)

    def stage_explain_h2(self) -> None:
        e = self.cfg.explain
        seed = self.cfg.seed
        params = {k: e[k] for k in ("h2_features", "h2_eval_sample_size", "recent_years", "min_tolerance")}
        with self.stage("explain_h2", seeds={"h2_sample_seed": seed}, params=params) as st:
            feats = self._features()
            model = load_model(st.read(self.out / "explain_shap" / "explainer.json"))
            h2_feats = [f for f in e["h2_features"] if f in feats]
            if len(h2_feats) < 2:
                raise GridError(f"need two H^2 features among {feats}, got {h2_feats}")
            pairs = list(itertools.combinations(h2_feats, 2))
            series = {p: [] for p in pairs}
            details = []
            for year in self.cfg.years:
                X = self._year_rows(st, year)
                for pair in pairs:
                    score = h2_interaction(model, X, pair, e["h2_eval_sample_size"], seed, feats, year)
                    series[pair].append(score.h2)
                    details.append(score.to_dict())
            sel = select_strongest_pair(series, e["recent_years"], e["min_tolerance"])
            dump_json({"years": self.cfg.years, "series": [{"pair": list(p), "h2": s} for p, s in series.items()],
                       "details": details}, st.dir / "h2.json")
            dump_json(sel.to_dict(), st.dir / "selection.json")

    def _selected_pair(self, st: Stage) -> tuple[str, str]:
        path = self.out / "explain_h2" / "selection.json"
        if not path.exists():
            raise FileNotFoundError(f"missing input {path}; run the explain h2 stage first")
        return tuple(st.json(path)["pair"])

    def stage_explain_ale(self) -> None:
        e = self.cfg.explain
        with self.stage("explain_ale", params={"ale_bins_1d": e["ale_bins_1d"], "ale_bins_2d": e["ale_bins_2d"]}) as st:
            feats = self._features()
            model = load_model(st.read(self.out / "explain_shap" / "explainer.json"))
            pair = self._selected_pair(st)
            X = np.vstack([self._year_rows(st, y) for y in self.cfg.years])
            curves = [ale_1d(model, X, f, e["ale_bins_1d"], feats).to_dict() for f in feats]
            dump_json({"curves": curves}, st.dir / "ale_1d.json")
            surface = ale_2d(model, X, pair, e["ale_bins_2d"], feats)
            lines = zero_crossing_isolines(surface)
            dump_json(surface.to_dict(), st.dir / "ale_2d.json")
            z = surface.effects
            dump_json({"pair": list(pair), "level": 0.0, "isolines": [ln.tolist() for ln in lines],
                       "effect_min": float(z.min()), "effect_max": float(z.max()),
                       "sign_reversal": bool(z.min() < 0 < z.max())}, st.dir / "isolines.json")

    def _city_codes(self, st: Stage):
        regions = self._regions(st)
        cities = {int(c["city_id"]): c for c in self._cities(st)}
        return regions.codes, cities

    def stage_stats_ks(self) -> None:
        with self.stage("stats_ks") as st:
            codes, cities = self._city_codes(st)
            feats = self._features()
            # unit of analysis: mean SHAP per (city, zone, year)
            groups: dict[str, list[np.ndarray]] = {}
            for year in self.cfg.years:
                shap = st.shap(self._shap_path(year))
                pix_codes = codes[shap.mask]
                for code in np.unique(pix_codes):
                    city = cities.get(int(code) // 10)
                    if city is None:
                        continue
                    zone = "core" if int(code) % 10 == 1 else "ring"
                    key = f"{city['climate']}-{zone}"
                    groups.setdefault(key, []).append(shap.phi[pix_codes == code].mean(0))
            names = sorted(groups)
            tests = []
            for a, b in itertools.combinations(names, 2):
                A, B = np.array(groups[a]), np.array(groups[b])
                for j, f in enumerate(feats):
                    r = ks_two_sample(A[:, j], B[:, j])
                    tests.append({"feature": f, "group_a": a, "group_b": b, **r.to_dict()})
            dump_json({"unit": "mean SHAP per city, zone and year", "groups": {k: len(v) for k, v in groups.items()},
                       "tests": tests}, st.dir / "ks.json")

    def stage_stats_trend(self) -> None:
        with self.stage("stats_trend") as st:
            codes, cities = self._city_codes(st)
            years = self.cfg.years
            series = {cid: [] for cid in cities}
            for year in years:
                pred = self._pred(st, year)
                for cid in cities:
                    m = (codes // 10 == cid) & (codes > 0) & pred.valid_mask
                    series[cid].append(float(pred.values[m].mean()) if m.any() else float("nan"))
            out = []
            for cid, vals in sorted(series.items()):
                row = {"city_id": cid, "name": cities[cid]["name"], "years": years, "mean_hi": vals}
                ok = np.isfinite(vals)
                if ok.sum() >= 3:
                    row["trend"] = linear_trend(np.asarray(years)[ok], np.asarray(vals)[ok]).to_dict()
                else:
                    row["trend"] = None
                    row["note"] = "fewer than 3 years"
                out.append(row)
            dump_json({"cities": out}, st.dir / "trend.json")

    def stage_stats_effects(self) -> None:
        with self.stage("stats_effects") as st:
            out = {}
            for year in self.cfg.years:
                shap = st.shap(self._shap_path(year))
                pred = self._pred(st, year)
                rmse = st.json(self.out / "downscale" / str(year) / "eval.json")["ensemble"]["rmse"]
                sizes = effect_sizes(shap.phi, shap.feature_names, pred.values[shap.mask], rmse)
                out[str(year)] = {"rmse": rmse, "effects": [s.to_dict() for s in sizes]}
            dump_json({"years": out}, st.dir / "effects.json")

    def stage_stats_bootstrap(self) -> None:
        s = self.cfg.stats
        seed = self.cfg.seed
        with self.stage("stats_bootstrap", seeds={"bootstrap_seed": seed},
                        params={"replicates": s["bootstrap_replicates"], "level": s["bootstrap_level"]}) as st:
            codes, cities = self._city_codes(st)
            pair = self._selected_pair(st)
            blocks = {}
            for year in self.cfg.years:
                shap = st.shap(self._shap_path(year))
                net = shap.column(pair[0]) + shap.column(pair[1])
                cid = codes[shap.mask] // 10
                for c in sorted(cities):
                    if np.any(cid == c):
                        blocks[(c, year)] = net[cid == c]
            mean_net = block_bootstrap(np.mean, blocks, s["bootstrap_replicates"], seed, s["bootstrap_level"])
            coverage = block_bootstrap(lambda v: 100.0 * np.mean(v < 0), blocks, s["bootstrap_replicates"], seed,
                                       s["bootstrap_level"])
            dump_json({"pair": list(pair), "blocks": "(city, year)", "mean_net_shap": mean_net.to_dict(),
                       "cooling_coverage_pct": coverage.to_dict()}, st.dir / "bootstrap.json")

    def stage_validate(self, stations_path=None) -> None:
        with self.stage("validate") as st:
            path = stations_path or self.cfg.input_path(self._inputs()["stations"])
            records = read_stations(st.read(path))
            grids = {y: self._pred(st, y) for y in self.cfg.years}
            result = validate_stations(records, grids)
            write_paired_csv(result, st.dir / "paired.csv")
            # the mean-structure map is reported too: the max-ensemble is biased upward by design
            rf = validate_stations(records, {y: st.grid(self.out / "downscale" / str(y) / "pred_rf.f32")
                                             for y in self.cfg.years})
            dump_json({**result.to_dict(), "rf_report": rf.report.to_dict()}, st.dir / "validation.json")

    def write_run_manifest(self) -> Path:
        rel = self.relpath
        body = {
            "config_hash": self.cfg.config_hash,
            "seed": self.cfg.seed,
            "versions": library_versions(),
            "stages": [{"stage": n, "manifest": rel(p), "sha256": sha256_file(p)} for n, p in self.completed],
        }
        return dump_json(body, self.out / "run_manifest.json")


def run_pipeline(cfg: PipelineConfig) -> Path:
    """hi -> downscale (per year) -> explain shap/pairs/h2/ale -> stats -> station validation."""
    pipe = Pipeline(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    if cfg.synthetic is not None and cfg.inputs is None:
        pipe.stage_synth()
    for year in cfg.years:
        pipe.stage_hi(year)
    for year in cfg.years:
        pipe.stage_downscale(year)
    pipe.stage_explain_shap()
    pipe.stage_explain_pairs()
    pipe.stage_explain_h2()
    pipe.stage_explain_ale()
    pipe.stage_stats_ks()
    pipe.stage_stats_trend()
    pipe.stage_stats_effects()
    pipe.stage_stats_bootstrap()
    if cfg.inputs.get("stations"):
        pipe.stage_validate()
    pipe.write_run_manifest()
    return cfg.output_dir


# ---------------------------------------------------------------------------
# station validation


@dataclass(eq=False)
class StationValidation:
    report: EvalReport
    pairs: list            # (station_id, year, lat, lon, row, col, observed, predicted)
    skipped_outside: int
    skipped_invalid: int
    skipped_no_grid: int

    def to_dict(self) -> dict:
        return {"report": self.report.to_dict(), "n_pairs": len(self.pairs),
                "skipped_outside": self.skipped_outside, "skipped_invalid": self.skipped_invalid,
                "skipped_no_grid": self.skipped_no_grid}


def validate_stations(records: Sequence[StationRecord], grids: Mapping[int, Grid]) -> StationValidation:
    """Pair each station with the predicted HI of its containing cell for its year."""
    pairs = []
    outside = invalid = no_grid = 0
    for s in records:
        g = grids.get(int(s.year))
        if g is None:
            no_grid += 1
            continue
        cell = g.header.cell_of(s.lat, s.lon)
        if cell is None:
            outside += 1
            continue
        v = g.values[cell]
        if not np.isfinite(v):
            invalid += 1
            continue
        pairs.append((s.station_id, int(s.year), s.lat, s.lon, cell[0], cell[1], s.observed_hi, float(v)))
    if len(pairs) < 2:
        raise ValueError(f"only {len(pairs)} station records could be paired; need at least 2")
    report = evaluate([p[7] for p in pairs], [p[6] for p in pairs])
    return StationValidation(report, pairs, outside, invalid, no_grid)


def write_paired_csv(result: StationValidation, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "year", "lat", "lon", "row", "col", "observed_hi", "predicted_hi"])
        for row in result.pairs:
            w.writerow([row[0], row[1], repr(row[2]), repr(row[3]), row[4], row[5], repr(row[6]), repr(row[7])])
    return path
