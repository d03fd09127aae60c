import numpy as np
import pytest

from urbanhi.explain_ale import (
    AleSurface,
    ale_1d,
    ale_2d,
    h2_interaction,
    quantile_edges,
    select_strongest_pair,
    zero_crossing_isolines,
)


def uniform(n=10_000, d=2, lo=0.0, hi=1.0, seed=0):
    return np.random.default_rng(seed).uniform(lo, hi, size=(n, d))


def product(X):
    return X[:, 0] * X[:, 1]


def additive(X):
    return np.sin(3 * X[:, 0]) + X[:, 1] ** 2


class TestAle1d:
    def test_constant_model(self):
        c = ale_1d(lambda X: np.full(len(X), 4.0), uniform(500), 0)
        assert np.all(c.effects == 0)

    def test_linear(self):
        X = uniform()
        c = ale_1d(lambda X: 3 * X[:, 0], X, 0, 20)
        np.testing.assert_allclose(c.effects, 3 * (c.bin_edges - X[:, 0].mean()), atol=0.02)
        e = c.bin_edges
        lo, hi = 2, 18  # 10th and 90th percentile edges
        slope = (c.effects[hi] - c.effects[lo]) / (e[hi] - e[lo])
        assert abs(slope / 3 - 1) < 0.01

    def test_additive_recovers_components(self):
        X = uniform(d=2, seed=1)
        c0 = ale_1d(additive, X, 0)
        g = np.sin(3 * c0.bin_edges)
        np.testing.assert_allclose(c0.effects, g - np.sin(3 * X[:, 0]).mean(), atol=0.05)
        c1 = ale_1d(additive, X, 1)
        np.testing.assert_allclose(c1.effects, c1.bin_edges ** 2 - (X[:, 1] ** 2).mean(), atol=0.05)

    def test_centering(self):
        X = uniform(3000, 3, seed=2)
        c = ale_1d(lambda X: np.exp(X[:, 0]) * X[:, 2], X, 0, 15)
        mid = 0.5 * (c.effects[:-1] + c.effects[1:])
        assert abs(np.sum(c.counts * mid) / c.counts.sum()) < 1e-8
        assert np.all(np.diff(c.bin_edges) >= 0) and c.counts.sum() == 3000

    def test_named_feature(self):
        X = uniform(1000, 2)
        a = ale_1d(lambda X: X[:, 1], X, "b", 10, ["a", "b"])
        assert a.feature == "b" and a.to_dict()["effects"][0] < 0

    def test_empty(self):
        with pytest.raises(ValueError):
            ale_1d(lambda X: X[:, 0], np.empty((0, 2)), 0)

    def test_constant_feature(self):
        X = np.column_stack([np.ones(50), np.arange(50.0)])
        c = ale_1d(lambda X: X[:, 1], X, 0)
        assert np.all(c.effects == 0)


class TestAle2d:
    def test_additive_annihilated(self):
        X = uniform(d=2, seed=3)
        s = ale_2d(additive, X, (0, 1))
        rng_f = np.ptp(additive(X))
        assert np.max(np.abs(s.effects)) < 0.05 * rng_f
        assert np.max(np.abs(s.effects)) < 0.05

    def test_product_surface(self):
        X = uniform(d=2, lo=-1, hi=1, seed=4)
        s = ale_2d(product, X, (0, 1))
        ref = np.outer(s.edges_x, s.edges_y)
        assert np.max(np.abs(s.effects - ref)) < 0.05
        c = AleSurface.cell_means(s.effects)
        k = c.shape[0] // 2
        assert c[k:, k:].min() > 0 and c[:k, :k].min() > 0
        assert c[k:, :k].max() < 0 and c[:k, k:].max() < 0

    def test_centering(self):
        X = uniform(d=3, seed=5)
        s = ale_2d(lambda X: X[:, 0] * X[:, 1] ** 2 + X[:, 2], X, (0, 1))
        w = s.counts
        assert abs(np.sum(w * AleSurface.cell_means(s.effects)) / w.sum()) < 1e-8

    def test_constant_model(self):
        s = ale_2d(lambda X: np.zeros(len(X)), uniform(2000), (0, 1))
        assert np.all(np.abs(s.effects) < 1e-15)

    def test_empty_cells_imputed(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(size=4000)
        X = np.column_stack([x, x + 0.01 * rng.normal(size=4000)])  # strongly correlated
        s = ale_2d(product, X, (0, 1), 6)
        assert s.imputed.any() and np.all(s.counts[s.imputed] == 0)
        assert np.all(np.isfinite(s.effects))

    def test_constant_feature_error(self):
        X = np.column_stack([np.ones(100), np.arange(100.0)])
        with pytest.raises(ValueError):
            ale_2d(product, X, (0, 1))


class TestIsolines:
    def test_uniform_sign(self):
        s = AleSurface(("a", "b"), np.linspace(0, 1, 5), np.linspace(0, 1, 5), np.ones((5, 5)), np.ones((4, 4)))
        assert zero_crossing_isolines(s) == []

    def test_ramp(self):
        ex = np.linspace(0, 1, 11)
        z = np.repeat((ex - 0.5)[:, None] + 1e-3, 11, axis=1)
        s = AleSurface(("a", "b"), ex, ex, z, np.ones((10, 10)))
        lines = zero_crossing_isolines(s)
        assert len(lines) == 1
        assert np.all(np.abs(lines[0][:, 0] - 0.5) <= 0.05)
        assert np.ptp(lines[0][:, 1]) == pytest.approx(1.0)

    def test_product_axes(self):
        X = uniform(d=2, lo=-1, hi=1, seed=7)
        s = ale_2d(product, X, (0, 1))
        lines = zero_crossing_isolines(s)
        assert lines
        half_cell = 0.5 * max(np.diff(s.edges_x).max(), np.diff(s.edges_y).max())
        pts = np.vstack(lines)
        assert np.all(np.minimum(np.abs(pts[:, 0]), np.abs(pts[:, 1])) <= half_cell)

    def test_nonfinite(self):
        s = AleSurface(("a", "b"), np.arange(2.0), np.arange(2.0), np.array([[np.nan, 1], [-1, 0]]), np.ones((1, 1)))
        with pytest.raises(ValueError):
            zero_crossing_isolines(s)


class TestH2:
    def test_additive(self):
        h = h2_interaction(additive, uniform(2000, seed=8), (0, 1), 300)
        assert h.h2 < 0.05

    def test_product(self):
        h = h2_interaction(product, uniform(2000, lo=-1, hi=1, seed=9), (0, 1), 300)
        assert h.h2 > 0.8
        assert 0 <= h.h2 <= 1

    def test_constant(self):
        h = h2_interaction(lambda X: np.full(len(X), 3.0), uniform(100), (0, 1))
        assert h.degenerate and h.h2 == 0.0

    def test_third_feature_ignored(self):
        X = uniform(1000, 3, seed=10)
        h = h2_interaction(lambda X: X[:, 0] + X[:, 1] + X[:, 1] * X[:, 2], X, ("a", "b"), 200,
                           feature_names=["a", "b", "c"])
        assert h.pair == ("a", "b") and h.h2 < 0.05


class TestSelection:
    def test_fallback_case(self):
        a = [0.30] * 18
        b = [0.10] * 13 + [0.50] * 5
        s = select_strongest_pair({("A", "x"): a, ("B", "x"): b})
        assert s.candidate == ("B", "x")
        assert s.recent_mean == pytest.approx(0.50)
        assert s.long_run_mean == pytest.approx(3.8 / 18)
        assert s.long_run_std == pytest.approx(np.std(b))
        assert abs(s.recent_mean - s.long_run_mean) > s.tolerance
        assert s.pair == ("A", "x") and s.rationale == "long_run_fallback"

    def test_stable_case(self):
        a = [0.305, 0.295] * 9
        b = [0.28] * 18
        s = select_strongest_pair({("A", "x"): a, ("B", "x"): b})
        assert s.pair == ("A", "x") and s.rationale == "stable_recent"
        assert s.tolerance == 0.02

    def test_single_pair(self):
        s = select_strongest_pair({("A", "B"): [0.1] * 13 + [0.9] * 5})
        assert s.pair == ("A", "B")

    def test_short_series(self):
        s = select_strongest_pair({("A", "B"): [0.2, 0.3], ("A", "C"): [0.4, 0.1]})
        assert s.rationale == "short_series" and s.pair == ("A", "B")

    def test_deterministic(self):
        scores = {("A", "B"): [0.2] * 6, ("C", "D"): [0.2] * 6}
        assert select_strongest_pair(scores) == select_strongest_pair(dict(reversed(list(scores.items()))))
        assert select_strongest_pair(scores).pair == ("A", "B")


def test_quantile_edges_merge_duplicates():
    e = quantile_edges(np.array([0, 0, 0, 0, 1.0]), 4)
    assert e.tolist() == [0.0, 1.0]
