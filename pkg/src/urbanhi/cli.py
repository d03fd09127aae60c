"""Command-line entry point: ``urbanhi <subcommand> ...``.

Most subcommands work in two ways: on explicit files (grids, model JSON, CSV
tables), or with ``--config`` as one stage of the pipeline.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .pipeline import EXIT_OK, ConfigError, Pipeline, _plain, dump_json, exit_code_for, load_config, run_pipeline

log = logging.getLogger("urbanhi")


def _emit(obj, out=None) -> None:
    if out:
        dump_json(obj, out)
        print(out)
    else:
        print(json.dumps(_plain(obj), indent=2, sort_keys=True))


def _numbers(arg: str) -> list[float]:
    """A CSV file (first column, header optional) or an inline comma list."""
    p = Path(arg)
    if p.is_file():
        vals = []
        with p.open(newline="") as fh:
            for row in csv.reader(fh):
                if not row or not row[0].strip():
                    continue
                try:
                    vals.append(float(row[0]))
                except ValueError:
                    if vals:
                        raise ValueError(f"{p}: non-numeric value {row[0]!r}") from None
        return vals
    try:
        return [float(v) for v in arg.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{arg!r} is neither a file nor a comma-separated list of numbers") from None


def _read_table(path) -> tuple[list[str], np.ndarray]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: need a header row and at least one data row")
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)


def _read_stack(path):
    from .grid import align_stack, read_grid

    path = Path(path)
    spec = json.loads(path.read_text())
    layers = spec.get("layers", spec)
    return align_stack({name: read_grid(path.parent / rel) for name, rel in layers.items()})


def _pair(text: str) -> tuple[str, str]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"a pair is two comma-separated names, got {text!r}")
    return parts[0], parts[1]


def _pipeline(args) -> Pipeline:
    cfg = load_config(args.config, output_root=args.output)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    pipe = Pipeline(cfg)
    if cfg.inputs is None:
        # synthetic configs reuse inputs written by an earlier run when present
        prior = cfg.output_dir / "inputs" / "inputs.json"
        if prior.exists():
            cfg.inputs = json.loads(prior.read_text())["inputs"]
            cfg.inputs_base = prior.parent
        else:
            pipe.stage_synth()
    return pipe


def _years(pipe: Pipeline, year) -> list[int]:
    if year is None:
        return pipe.cfg.years
    if year not in pipe.cfg.years:
        raise ConfigError(f"year {year} is not in the config (have {pipe.cfg.years})")
    return [year]


# ---------------------------------------------------------------------------
# hi


def cmd_hi(args) -> int:
    from .grid import read_grid, write_grid
    from .heat_index import TaggedField, celsius_to_fahrenheit, heat_index_f, heat_index_grid, seasonal_mam_aggregate

    if args.config:
        pipe = _pipeline(args)
        for y in _years(pipe, args.year):
            pipe.stage_hi(y)
        return EXIT_OK
    if args.t_grid or args.rh_grid:
        if len(args.t_grid or []) != len(args.rh_grid or []):
            raise ConfigError("--t-grid and --rh-grid must be given the same number of times")
        if not args.out:
            raise ConfigError("grid mode needs --out")
        his = [heat_index_grid(read_grid(t), read_grid(rh)) for t, rh in zip(args.t_grid, args.rh_grid)]
        if args.month_tag:
            if len(args.month_tag) != len(his):
                raise ConfigError("give one --month-tag per temperature/humidity pair")
            out = seasonal_mam_aggregate([TaggedField(g, m, f"{i:04d}") for i, (g, m) in
                                          enumerate(zip(his, args.month_tag))], args.mode)
        elif len(his) == 1:
            out = his[0]
        else:
            raise ConfigError("several grid pairs need --month-tag for seasonal aggregation")
        write_grid(out, args.out)
        print(Path(args.out))
        return EXIT_OK
    if (args.t_f is None) == (args.t_c is None) or args.rh is None:
        raise ConfigError("give --config, grid flags, or --rh with exactly one of --t-f / --t-c")
    t_f = args.t_f if args.t_f is not None else float(celsius_to_fahrenheit(args.t_c))
    _emit(heat_index_f(t_f, args.rh).to_dict())
    return EXIT_OK


# ---------------------------------------------------------------------------
# downscale


def cmd_downscale(args) -> int:
    pipe = _pipeline(args)
    for y in _years(pipe, args.year):
        if not (pipe.out / "hi" / str(y) / "hi_mam.f32").exists():
            pipe.stage_hi(y)
        pipe.stage_downscale(y)
    return EXIT_OK


# ---------------------------------------------------------------------------
# explain


def cmd_explain_shap(args) -> int:
    if args.config:
        _pipeline(args).stage_explain_shap()
        return EXIT_OK
    from .explain_shap import BackgroundSet, compress_background, explain_region, write_shap
    from .grid import read_categorical
    from .trees import load_model

    if not (args.model and args.stack and args.out):
        raise ConfigError("explain shap needs --config, or --model, --stack and --out")
    model = load_model(args.model)
    stack = _read_stack(args.stack)
    names = list(model.feature_names)
    region = read_categorical(args.region).codes > 0 if args.region else None
    if args.background:
        bg = BackgroundSet.from_dict(json.loads(Path(args.background).read_text()))
    else:
        X = stack.subset(names).matrix(names)
        bg = compress_background(X, k=min(args.k, X.shape[0]), seed=args.seed, feature_names=names)
    shap = explain_region(model, stack, bg, feature_names=names, region_mask=region)
    stem = write_shap(shap, args.out)
    print(stem.with_suffix(".json"))
    return EXIT_OK


def cmd_explain_pairs(args) -> int:
    if args.config:
        _pipeline(args).stage_explain_pairs()
        return EXIT_OK
    from .explain_shap import pairwise_joint_summary, read_shap

    if not (args.shap and args.stack):
        raise ConfigError("explain shap-pairs needs --config, or --shap and --stack")
    shap = read_shap(args.shap)
    stack = _read_stack(args.stack)
    pairs = [_pair(args.pair)] if args.pair else list(itertools.combinations(shap.feature_names, 2))
    res = [pairwise_joint_summary(shap, stack, p, args.quantile).to_dict() for p in pairs]
    _emit({"inputs": {"shap": args.shap, "stack": args.stack, "joint_high_quantile": args.quantile},
           "summaries": res}, args.out)
    return EXIT_OK


def _model_columns(model, names, X):
    """Reorder table columns to the model's features; unnamed models take the table order."""
    if not model.feature_names:
        if X.shape[1] != model.n_features:
            raise ConfigError(f"model expects {model.n_features} columns, table has {X.shape[1]}")
        return X, list(names)
    missing = [f for f in model.feature_names if f not in names]
    if missing:
        raise ConfigError(f"data table lacks model feature(s) {missing}")
    return X[:, [names.index(f) for f in model.feature_names]], list(model.feature_names)


def cmd_explain_ale(args) -> int:
    if args.config:
        _pipeline(args).stage_explain_ale()
        return EXIT_OK
    from .explain_ale import ale_1d, ale_2d, zero_crossing_isolines
    from .trees import load_model

    if not (args.model and args.data and (args.feature or args.pair)):
        raise ConfigError("explain ale needs --config, or --model, --data and --feature/--pair")
    model = load_model(args.model)
    names, X = _read_table(args.data)
    X, names = _model_columns(model, names, X)
    out = {"inputs": {"model": args.model, "data": args.data, "bins": args.bins}}
    if args.feature:
        out["curve"] = ale_1d(model, X, args.feature, args.bins, names).to_dict()
    if args.pair:
        surface = ale_2d(model, X, _pair(args.pair), args.bins, names)
        out["surface"] = surface.to_dict()
        out["isolines"] = [ln.tolist() for ln in zero_crossing_isolines(surface)]
    _emit(out, args.out)
    return EXIT_OK


def _read_scores(path) -> dict:
    """Long CSV with columns year, feature_a, feature_b, h2."""
    series: dict = {}
    with Path(path).open(newline="") as fh:
        rows = sorted(csv.DictReader(fh), key=lambda r: int(r["year"]))
    for r in rows:
        series.setdefault((r["feature_a"], r["feature_b"]), []).append(float(r["h2"]))
    return series


def cmd_explain_h2(args) -> int:
    if args.config:
        _pipeline(args).stage_explain_h2()
        return EXIT_OK
    from .explain_ale import h2_interaction, select_strongest_pair
    from .trees import load_model

    if args.years:
        series = _read_scores(args.years)
        if args.pairs != "all":
            keep = {_pair(p) for p in args.pairs.split(";")}
            series = {k: v for k, v in series.items() if k in keep}
        sel = select_strongest_pair(series, args.recent_years, args.min_tolerance)
        _emit({"inputs": {"scores": args.years, "pairs": args.pairs}, "selection": sel.to_dict()}, args.out)
        return EXIT_OK
    if not (args.model and args.data):
        raise ConfigError("explain h2 needs --config, --years scores.csv, or --model and --data")
    model = load_model(args.model)
    names, X = _read_table(args.data)
    X, names = _model_columns(model, names, X)
    pairs = (list(itertools.combinations(names, 2)) if args.pairs == "all"
             else [_pair(p) for p in args.pairs.split(";")])
    scores = [h2_interaction(model, X, p, args.sample_size, args.seed, names).to_dict() for p in pairs]
    _emit({"inputs": {"model": args.model, "data": args.data, "pairs": args.pairs}, "scores": scores}, args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# stats


def cmd_stats(args) -> int:
    from .stats import block_bootstrap, effect_sizes, ks_two_sample, linear_trend

    what = args.what
    if what == "ks" and args.a:
        if not args.b:
            raise ConfigError("--a needs --b")
        a, b = _numbers(args.a), _numbers(args.b)
        _emit({"inputs": {"a": args.a, "b": args.b}, "result": ks_two_sample(a, b).to_dict()}, args.out)
        return EXIT_OK
    if what == "trend" and (args.csv or args.values):
        if args.csv:
            _, T = _read_table(args.csv)
            years, values = T[:, 0], T[:, 1]
        else:
            if not args.years:
                raise ConfigError("--values needs --years")
            years, values = _numbers(args.years), _numbers(args.values)
        _emit({"inputs": {"csv": args.csv, "years": list(years), "values": list(values)},
               "result": linear_trend(years, values).to_dict()}, args.out)
        return EXIT_OK
    if what == "effects" and args.shap:
        from .explain_shap import read_shap

        if not args.eval:
            raise ConfigError("--shap needs --eval")
        shap = read_shap(args.shap)
        ev = json.loads(Path(args.eval).read_text())
        rmse = ev["ensemble"]["rmse"] if "ensemble" in ev else ev["rmse"]
        sizes = effect_sizes(shap.phi, shap.feature_names, shap.predictions, rmse)
        _emit({"inputs": {"shap": args.shap, "eval": args.eval, "rmse": rmse},
               "effects": [s.to_dict() for s in sizes]}, args.out)
        return EXIT_OK
    if what == "bootstrap" and args.csv:
        blocks: dict = {}
        with Path(args.csv).open(newline="") as fh:
            for r in csv.DictReader(fh):
                blocks.setdefault(r["block"], []).append(float(r["value"]))
        res = block_bootstrap(np.mean, blocks, args.replicates, args.seed, args.level)
        _emit({"inputs": {"csv": args.csv, "statistic": "mean", "replicates": args.replicates, "seed": args.seed},
               "result": res.to_dict()}, args.out)
        return EXIT_OK
    if not args.config:
        raise ConfigError(f"stats {what} needs --config or its file arguments")
    pipe = _pipeline(args)
    {
        "ks": pipe.stage_stats_ks,
        "trend": pipe.stage_stats_trend,
        "effects": pipe.stage_stats_effects,
        "bootstrap": pipe.stage_stats_bootstrap,
    }[what]()
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth / validate / run


def cmd_synth(args) -> int:
    from .synth import SyntheticWorldSpec, generate_synthetic_world, write_world

    d = json.loads(Path(args.spec).read_text()) if args.spec else {}
    for key in ("rows", "cols", "noise_sigma", "seed"):
        if getattr(args, key) is not None:
            d[key] = getattr(args, key)
    if args.years:
        d["years"] = [int(y) for y in args.years.split(",")]
    try:
        spec = SyntheticWorldSpec.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    out = Path(args.out)
    inputs = write_world(generate_synthetic_world(spec), out)
    dump_json({"seed": spec.seed, "output_dir": "run", "inputs": inputs}, out / "config.json")
    print(out / "config.json")
    return EXIT_OK


def cmd_validate(args) -> int:
    pipe = _pipeline(args)
    if not args.stations and not pipe.cfg.inputs.get("stations"):
        raise ConfigError("no station file in the config; pass --stations")
    pipe.stage_validate(args.stations)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config, output_root=args.output)
    print(run_pipeline(cfg))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _config_flags(sp, required=False):
    sp.add_argument("--config", required=required, help="pipeline config JSON")
    sp.add_argument("--output", help="output root (overrides config and URBANHI_OUTPUT_ROOT)")
    return sp


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="urbanhi", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log stage progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = _config_flags(sub.add_parser("hi", help="heat index for a point, grid pairs, or a config"))
    sp.add_argument("--t-f", type=float, help="air temperature, deg F")
    sp.add_argument("--t-c", type=float, help="air temperature, deg C")
    sp.add_argument("--rh", type=float, help="relative humidity, percent")
    sp.add_argument("--t-grid", action="append", help="temperature grid (deg C), repeatable")
    sp.add_argument("--rh-grid", action="append", help="humidity grid (percent), repeatable")
    sp.add_argument("--month-tag", action="append", help="Mar/Apr/May per grid pair, repeatable")
    sp.add_argument("--mode", choices=("mean", "max"), default="mean")
    sp.add_argument("--out")
    sp.add_argument("--year", type=int)
    sp.set_defaults(func=cmd_hi)

    sp = _config_flags(sub.add_parser("downscale", help="train and apply the RF + Q90 ensemble"), True)
    sp.add_argument("--year", type=int)
    sp.set_defaults(func=cmd_downscale)

    ex = sub.add_parser("explain", help="SHAP, joint pair summaries, ALE and H^2")
    esub = ex.add_subparsers(dest="what", required=True)
    sp = _config_flags(esub.add_parser("shap"))
    sp.add_argument("--model")
    sp.add_argument("--stack", help="JSON mapping layer name to grid path")
    sp.add_argument("--background", help="background JSON; compressed from the stack if omitted")
    sp.add_argument("--region", help="categorical grid; codes > 0 are explained")
    sp.add_argument("--k", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_explain_shap)

    sp = _config_flags(esub.add_parser("shap-pairs"))
    sp.add_argument("--shap")
    sp.add_argument("--stack")
    sp.add_argument("--pair", help="e.g. EVI,FPAR; all pairs if omitted")
    sp.add_argument("--quantile", type=float, default=0.75)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_explain_pairs)

    sp = _config_flags(esub.add_parser("ale"))
    sp.add_argument("--model")
    sp.add_argument("--data", help="CSV table with a header of feature names")
    sp.add_argument("--feature")
    sp.add_argument("--pair")
    sp.add_argument("--bins", type=int, default=20)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_explain_ale)

    sp = _config_flags(esub.add_parser("h2"))
    sp.add_argument("--pairs", default="all", help="'all' or 'A,B;C,D'")
    sp.add_argument("--years", help="CSV of year, feature_a, feature_b, h2 for pair selection")
    sp.add_argument("--model")
    sp.add_argument("--data")
    sp.add_argument("--sample-size", type=int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--recent-years", type=int, default=5)
    sp.add_argument("--min-tolerance", type=float, default=0.02)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_explain_h2)

    stp = sub.add_parser("stats", help="KS tests, trends, effect sizes, block bootstrap")
    ssub = stp.add_subparsers(dest="what", required=True)
    for name in ("ks", "trend", "effects", "bootstrap"):
        sp = _config_flags(ssub.add_parser(name))
        sp.add_argument("--out")
        sp.set_defaults(func=cmd_stats, a=None, b=None, csv=None, years=None, values=None, shap=None, eval=None)
        if name == "ks":
            sp.add_argument("--a", help="CSV file or comma list")
            sp.add_argument("--b", help="CSV file or comma list")
        elif name == "trend":
            sp.add_argument("--csv", help="CSV with year, value columns")
            sp.add_argument("--years")
            sp.add_argument("--values")
        elif name == "effects":
            sp.add_argument("--shap")
            sp.add_argument("--eval")
        else:
            sp.add_argument("--csv", help="CSV with block, value columns")
            sp.add_argument("--replicates", type=int, default=1000)
            sp.add_argument("--seed", type=int, default=0)
            sp.add_argument("--level", type=float, default=0.95)

    sp = sub.add_parser("synth", help="write a synthetic world and a config that points at it")
    sp.add_argument("--out", required=True)
    sp.add_argument("--spec", help="JSON file with synthetic world fields")
    sp.add_argument("--rows", type=int)
    sp.add_argument("--cols", type=int)
    sp.add_argument("--years", help="comma separated")
    sp.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = _config_flags(sub.add_parser("validate", help="pair stations with predicted HI"), True)
    sp.add_argument("--stations", help="station CSV (defaults to the config's)")
    sp.set_defaults(func=cmd_validate)

    sp = _config_flags(sub.add_parser("run", help="full pipeline"), True)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits with 2 on usage errors, which is already the config code
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
