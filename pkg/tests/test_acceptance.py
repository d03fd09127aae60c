"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line in the summary.

Run with ``pytest tests/test_acceptance.py``. Sub-checks inside a criterion are all
evaluated before the verdict so a failure message lists every miss at once.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.interpolate import RegularGridInterpolator

from urbanhi.downscale import evaluate, make_training_table, split_train_test, tail_bias, train_year
from urbanhi.explain_ale import (
    AleSurface,
    ale_1d,
    ale_2d,
    h2_interaction,
    select_strongest_pair,
    zero_crossing_isolines,
)
from urbanhi.explain_shap import (
    BackgroundSet,
    ShapMatrix,
    compress_background,
    explain_region,
    fit_explainer,
    pairwise_joint_summary,
    tree_shap_interventional,
)
from urbanhi.heat_index import heat_index_f, heat_index_f_array
from urbanhi.pipeline import load_config, run_pipeline
from urbanhi.stats import ks_statistic, ks_two_sample, linear_trend, stars_for
from urbanhi.synth import SyntheticWorldSpec, generate_synthetic_world
from urbanhi.trees import TrainParams, fit_random_forest

from nws_oracle import NWS_CHART, oracle_hi_f
from shap_oracle import brute_force_shapley
from test_stats import ks_enumerate

ROOT = Path(__file__).resolve().parents[1]
EXPLAIN_FEATURES = ["EVI", "LAI", "FPAR", "NTL", "LCZ_COMPACT", "LCZ_VEGETATED", "LCZ_OPEN"]


class Checks:
    """Accumulates named sub-check outcomes; ``verdict`` fails listing every miss."""

    def __init__(self):
        self.misses = []

    def __call__(self, ok, label):
        if not ok:
            self.misses.append(label)
        return ok

    def verdict(self):
        assert not self.misses, "; ".join(self.misses)


@pytest.mark.criterion(1, "heat index exactness, NWS chart, runtime")
def test_criterion_1_heat_index():
    check = Checks()
    t0 = time.perf_counter()
    T, R = np.meshgrid(np.arange(60, 120.25, 0.5), np.arange(0, 100.25, 0.5), indexing="ij")
    got = heat_index_f_array(T, R)
    elapsed = time.perf_counter() - t0
    ref = np.vectorize(oracle_hi_f)(T, R)
    err = np.max(np.abs(got - ref))
    check(err < 1e-9, f"lattice max error {err:.3g} F")
    scalar = max(abs(heat_index_f(t, rh).hi_f - oracle_hi_f(t, rh)) for t, rh in zip(T.ravel()[::97], R.ravel()[::97]))
    check(scalar < 1e-9, f"scalar path max error {scalar:.3g} F")
    check(elapsed < 5.0, f"lattice runtime {elapsed:.2f} s")

    off = []
    for rh, row in NWS_CHART.items():
        for i, v in enumerate(row):
            t = 80 + 2 * i
            d = heat_index_f(t, rh).hi_f - v
            if abs(d) > 1.5:
                off.append(f"(T={t}, RH={rh}): {d:+.2f}")
    check(not off, "chart cells beyond 1.5 F: " + ", ".join(off))
    print(f"lattice error {err:.2e} F in {elapsed:.2f} s; chart misses {len(off)}")
    check.verdict()


@pytest.mark.criterion(2, "interventional TreeSHAP vs brute-force Shapley, region efficiency")
def test_criterion_2_shapley():
    check = Checks()
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for case in range(200):
        d = int(rng.integers(1, 13))
        X = rng.normal(size=(80, d))
        y = X @ rng.normal(size=d) + X[:, 0] * X[:, -1] + 0.1 * rng.normal(size=80)
        m = fit_random_forest(X, y, TrainParams(seed=case, max_depth=5), n_estimators=3)
        k = int(rng.integers(1, 5))
        bg = BackgroundSet(rng.normal(size=(k, d)), rng.dirichlet(np.ones(k)), k)
        x = rng.normal(size=d)
        phi, base = tree_shap_interventional(m, x, bg)
        ref, rbase = brute_force_shapley(m.predict, x, bg.centroids, bg.weights)
        worst = max(worst, float(np.max(np.abs(phi - ref))), abs(base - rbase))
    check(worst < 1e-9, f"max |phi - oracle| {worst:.3g}")

    world = generate_synthetic_world(SyntheticWorldSpec(years=(2003,)))
    yf = world.years[2003]
    X = yf.explain_stack.matrix(EXPLAIN_FEATURES)
    model = fit_explainer(X, yf.hi_true.values.ravel(), EXPLAIN_FEATURES, TrainParams(seed=0), n_estimators=40)
    bg = compress_background(X, 32, seed=0, feature_names=EXPLAIN_FEATURES)
    codes = world.regions.codes
    regions = [c for c in np.unique(codes) if c > 0]
    region_worst = 0.0
    for c in regions:
        s = explain_region(model, yf.explain_stack, bg, feature_names=EXPLAIN_FEATURES, region_mask=codes == c)
        resid = np.abs(s.base_value + s.phi.sum(1) - s.predictions)
        region_worst = max(region_worst, float(resid.max()))
    check(region_worst < 1e-6, f"region efficiency residual {region_worst:.3g} C")
    elapsed = time.perf_counter() - t0
    check(elapsed < 120, f"runtime {elapsed:.1f} s")
    print(f"oracle error {worst:.2e}; {len(regions)} regions, efficiency {region_worst:.2e} C; {elapsed:.1f} s")
    check.verdict()


@pytest.mark.criterion(3, "ALE slope, product surface, additive annihilation")
def test_criterion_3_ale():
    check = Checks()
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    X = rng.uniform(0, 1, size=(10_000, 3))
    coef = np.array([3.0, -1.5, 0.7])
    c = ale_1d(lambda Z: Z @ coef, X, 0, 20)
    lo, hi = np.quantile(X[:, 0], [0.1, 0.9])
    slope = (np.interp(hi, c.bin_edges, c.effects) - np.interp(lo, c.bin_edges, c.effects)) / (hi - lo)
    check(abs(slope / coef[0] - 1) < 0.01, f"1-D slope {slope:.4f} vs {coef[0]}")

    U = rng.uniform(-1, 1, size=(10_000, 2))
    s = ale_2d(lambda Z: Z[:, 0] * Z[:, 1], U, (0, 1))
    # the centered analytic surface x1*x2 minus its mean is ~0 for independent centered uniforms
    dev = np.max(np.abs(s.effects - np.outer(s.edges_x, s.edges_y)))
    check(dev < 0.05, f"product surface deviation {dev:.4f}")

    def additive(Z):
        return np.sin(3 * Z[:, 0]) + Z[:, 1] ** 2

    V = rng.uniform(0, 1, size=(10_000, 2))
    a = ale_2d(additive, V, (0, 1))
    ratio = np.max(np.abs(a.effects)) / np.ptp(additive(V))
    check(ratio < 0.05, f"additive max|ALE2| / range {ratio:.4f}")
    elapsed = time.perf_counter() - t0
    check(elapsed < 60, f"runtime {elapsed:.1f} s")
    print(f"slope ratio {slope / coef[0]:.4f}; product dev {dev:.4f}; additive ratio {ratio:.4f}; {elapsed:.1f} s")
    check.verdict()


@pytest.mark.criterion(4, "H^2 discrimination and strongest-pair selection")
def test_criterion_4_h2_selection():
    check = Checks()
    rng = np.random.default_rng(4)
    X = rng.uniform(-1, 1, size=(3000, 3))
    add = h2_interaction(lambda Z: np.sin(3 * Z[:, 0]) + Z[:, 1] ** 2 + Z[:, 2], X, (0, 1), 300)
    prod = h2_interaction(lambda Z: Z[:, 0] * Z[:, 1] + 0.0 * Z[:, 2], X, (0, 1), 300)
    check(add.h2 < 0.05, f"additive H2 {add.h2:.4f}")
    check(prod.h2 > 0.8, f"product H2 {prod.h2:.4f}")

    fb = select_strongest_pair({("A", "x"): [0.30] * 18, ("B", "x"): [0.10] * 13 + [0.50] * 5})
    check(fb.candidate == ("B", "x") and fb.pair == ("A", "x") and fb.rationale == "long_run_fallback",
          f"fallback case gave {fb.pair} ({fb.rationale})")
    check(abs(fb.long_run_mean - 3.8 / 18) < 1e-12 and abs(fb.recent_mean - 0.5) < 1e-12,
          "fallback case means")
    st = select_strongest_pair({("A", "x"): [0.305, 0.295] * 9, ("B", "x"): [0.28] * 18})
    check(st.pair == ("A", "x") and st.rationale == "stable_recent" and st.tolerance == 0.02,
          f"stable case gave {st.pair} ({st.rationale}, tol {st.tolerance})")
    print(f"additive H2 {add.h2:.4f}; product H2 {prod.h2:.4f}; fallback -> {fb.pair}; stable -> {st.pair}")
    check.verdict()


@pytest.mark.criterion(5, "quantile ensemble on the 128x128 synthetic world")
def test_criterion_5_ensemble():
    check = Checks()
    t0 = time.perf_counter()
    world = generate_synthetic_world(SyntheticWorldSpec(rows=128, cols=128, years=(2003,), noise_sigma=1.0))
    yf = world.years[2003]
    table = make_training_table(yf.stack, yf.target)
    train, test = split_train_test(table)
    model = train_year(train, year=2003)
    rf, q90, ens = model.predict_parts(test.X)
    truth = yf.hi_true.values.ravel()[test.pixel_index]

    mae = evaluate(ens, test.y).mae
    coverage = float(np.mean(test.y <= q90))
    bias_rf, bias_ens = tail_bias(rf, truth), tail_bias(ens, truth)
    check(mae <= 1.5, f"held-out ensemble MAE {mae:.3f} C")
    check(0.85 <= coverage <= 0.95, f"Q90 coverage {coverage:.3f}")
    check(bias_ens >= bias_rf, f"tail bias ensemble {bias_ens:+.3f} < RF {bias_rf:+.3f}")
    check(bias_rf < 0, f"RF tail bias {bias_rf:+.3f} not negative")
    elapsed = time.perf_counter() - t0
    check(elapsed < 600, f"runtime {elapsed:.0f} s")
    print(f"MAE {mae:.3f}; coverage {coverage:.3f}; tail bias RF {bias_rf:+.3f}, ensemble {bias_ens:+.3f}; "
          f"{elapsed:.0f} s")
    check.verdict()


@pytest.mark.criterion(6, "KS, trend and significance-tier exactness")
def test_criterion_6_statistics():
    check = Checks()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(2000):
        n1, n2 = rng.integers(1, 9, size=2)
        a = rng.integers(0, 7, size=n1).tolist()
        b = (rng.integers(0, 7, size=n2) + rng.choice([0.0, 0.5], size=n2)).tolist()
        worst = max(worst, abs(ks_statistic(a, b) - ks_enumerate(a, b)))
    check(worst <= 1e-15, f"KS exhaustive error {worst:.3g}")

    same = ks_two_sample([4, 1, 3, 3], [3, 4, 3, 1])
    check(same.d_statistic == 0 and same.p_value == 1, "identical samples")
    check(ks_two_sample([1, 2, 3], [10, 11, 12]).d_statistic == 1, "disjoint samples")
    check(abs(ks_two_sample([1, 2, 3], [1.5, 2.5, 3.5]).d_statistic - 1 / 3) <= 1e-15, "interleaved samples")

    years = np.arange(2003, 2021)
    line = linear_trend(years, 0.1 * years + 5)
    check(abs(line.slope - 0.1) < 1e-9 and line.p_value < 1e-12, "perfect line")
    flat = linear_trend(years, np.full(18, 30.0))
    check(flat.slope == 0 and flat.p_value == 1, "constant series")
    hits = 0
    for _ in range(500):
        r = linear_trend(years, 0.05 * (years - 2003) + rng.normal(0, 0.1, size=18))
        hits += bool(0.03 <= r.slope <= 0.07 and r.p_value < 0.05)
    check(hits >= 475, f"trend power {hits}/500")

    tiers = {0.009: "***", 0.049: "**", 0.09: "*", 0.5: "", 0.01: "**", 0.05: "*", 0.10: ""}
    bad = [p for p, s in tiers.items() if stars_for(p) != s]
    check(not bad, f"star tiers wrong at {bad}")
    print(f"KS error {worst:.1e}; trend power {hits}/500")
    check.verdict()


def _shap_from_net(net, evi, fpar):
    net = np.asarray(net, dtype=float)
    return ShapMatrix(0.0, np.column_stack([0.25 * net, 0.75 * net]), net, ["EVI", "FPAR"],
                      np.column_stack([evi, fpar]))


@pytest.mark.criterion(7, "pairwise joint summaries on constructed SHAP fields")
def test_criterion_7_joint_summaries():
    check = Checks()
    x = np.arange(10.0)
    s = pairwise_joint_summary(_shap_from_net(np.full(10, 0.5), x, x), None, ("EVI", "FPAR"))
    check(abs(s.mu_all - 0.5) < 1e-12 and abs(s.mu_hh - 0.5) < 1e-12 and s.cooling_coverage == 0, "constant +0.5")
    s = pairwise_joint_summary(_shap_from_net([1.0, -1.0] * 5, x, x), None, ("EVI", "FPAR"))
    check(abs(s.mu_all) < 1e-12 and abs(s.cooling_coverage - 50.0) < 1e-12, "symmetric +-1")

    rng = np.random.default_rng(7)
    for n in (100, 401, 1000):
        evi, fpar = rng.permutation(n).astype(float), rng.permutation(n).astype(float)
        hh = (evi >= np.quantile(evi, 0.75)) & (fpar >= np.quantile(fpar, 0.75))
        q = hh.mean()
        s = pairwise_joint_summary(_shap_from_net(np.where(hh, -0.4, 0.1), evi, fpar), None, ("EVI", "FPAR"))
        check(s.n_joint_high == hh.sum() > 0, f"n={n}: joint-high count")
        check(abs(s.mu_hh + 0.4) < 1e-12, f"n={n}: mu_hh {s.mu_hh}")
        check(abs(s.mu_all - (0.1 * (1 - q) - 0.4 * q)) < 1e-12, f"n={n}: mu_all {s.mu_all}")
        check(abs(s.cooling_coverage - 100 * q) < 1e-12, f"n={n}: coverage {s.cooling_coverage}")
    check.verdict()


def _stats_bytes(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.glob("stats_*/*.json"))}


@pytest.mark.slow
@pytest.mark.criterion(8, "end-to-end determinism and runtime on the bundled config")
def test_criterion_8_determinism(tmp_path):
    check = Checks()
    config = ROOT / "configs" / "synthetic.json"
    runs, times = [], []
    for name in ("a", "b"):
        t0 = time.perf_counter()
        runs.append(Path(run_pipeline(load_config(config, output_root=tmp_path / name))))
        times.append(time.perf_counter() - t0)
    a, b = runs
    check((a / "run_manifest.json").read_bytes() == (b / "run_manifest.json").read_bytes(), "run manifests differ")
    sa, sb = _stats_bytes(a), _stats_bytes(b)
    check(len(sa) >= 4 and sa.keys() == sb.keys(), f"stats files {sorted(sa)} vs {sorted(sb)}")
    differ = [k for k in sa if sa[k] != sb.get(k)]
    check(not differ, f"statistics JSON differs: {differ}")
    stage_manifests = [s["manifest"] for s in json.loads((a / "run_manifest.json").read_text())["stages"]]
    differ = [m for m in stage_manifests if (a / m).read_bytes() != (b / m).read_bytes()]
    check(not differ, f"stage manifests differ: {differ}")
    check(max(times) < 900, f"runtimes {times}")
    print(f"two runs in {times[0]:.0f} s and {times[1]:.0f} s; {len(stage_manifests)} stage manifests identical")
    check.verdict()


@pytest.mark.criterion(9, "sign reversal and zero isoline on the strong-interaction world")
def test_criterion_9_reversal():
    check = Checks()
    spec = SyntheticWorldSpec(c_evi_fpar=2.0, b_evi=0.6, b_fpar=0.6, years=(2003,))
    yf = generate_synthetic_world(spec).years[2003]
    X = yf.explain_stack.matrix(EXPLAIN_FEATURES)
    model = fit_explainer(X, yf.hi_true.values.ravel(), EXPLAIN_FEATURES, TrainParams(seed=1), n_estimators=100)
    s = ale_2d(model, X, ("EVI", "FPAR"), 10, EXPLAIN_FEATURES)
    cells = AleSurface.cell_means(s.effects)
    k, m = cells.shape[0] // 2, cells.shape[1] // 2
    quad = {"HH": cells[k:, m:].mean(), "LL": cells[:k, :m].mean(),
            "HL": cells[k:, :m].mean(), "LH": cells[:k, m:].mean()}
    # +c z(EVI) z(FPAR) warms where both are high or both low, cools on the off-diagonals
    check(quad["HH"] > 0 and quad["LL"] > 0, f"diagonal quadrants {quad['HH']:+.3f}, {quad['LL']:+.3f}")
    check(quad["HL"] < 0 and quad["LH"] < 0, f"off-diagonal quadrants {quad['HL']:+.3f}, {quad['LH']:+.3f}")
    check(s.effects.max() > 0 > s.effects.min(), "no sign reversal on the surface")
    lines = zero_crossing_isolines(s)
    check(len(lines) > 0, "zero isoline set empty")

    # along the surface: warming where both are high, cooling where only one is
    surface = RegularGridInterpolator((s.edges_x, s.edges_y), s.effects)
    hi_e, lo_e = np.quantile(X[:, 0], [0.9, 0.1])
    hi_f, lo_f = np.quantile(X[:, 2], [0.9, 0.1])
    joint_high, mixed = float(surface([hi_e, hi_f])[0]), float(surface([hi_e, lo_f])[0])
    check(joint_high > 0 > mixed, f"surface at joint-high {joint_high:+.3f}, at high/low {mixed:+.3f}")
    print(f"quadrants {', '.join(f'{k} {v:+.2f}' for k, v in quad.items())}; {len(lines)} isolines; "
          f"joint-high {joint_high:+.2f}, high/low {mixed:+.2f}")
    check.verdict()
