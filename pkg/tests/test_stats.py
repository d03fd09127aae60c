from fractions import Fraction

import numpy as np
import pytest

from urbanhi.stats import (
    block_bootstrap,
    effect_sizes,
    kolmogorov_sf,
    ks_statistic,
    ks_two_sample,
    linear_trend,
    stars_for,
)


def ks_enumerate(a, b):
    """Exact sup-gap over every observed point, in rationals."""
    best = Fraction(0)
    for x in list(a) + list(b):
        fa = Fraction(sum(v <= x for v in a), len(a))
        fb = Fraction(sum(v <= x for v in b), len(b))
        best = max(best, abs(fa - fb))
    return float(best)


class TestKs:
    def test_identical(self):
        r = ks_two_sample([3, 1, 2, 2], [2, 3, 1, 2])
        assert r.d_statistic == 0 and r.p_value == 1 and r.stars == ""

    def test_disjoint(self):
        assert ks_two_sample([1, 2, 3], [10, 11, 12]).d_statistic == 1

    def test_interleaved(self):
        assert ks_two_sample([1, 2, 3], [1.5, 2.5, 3.5]).d_statistic == pytest.approx(1 / 3, abs=1e-15)

    def test_exhaustive_small(self):
        rng = np.random.default_rng(0)
        for _ in range(400):
            n1, n2 = rng.integers(1, 9, size=2)
            a = rng.integers(0, 6, size=n1).tolist()  # many ties
            b = rng.integers(0, 6, size=n2).tolist()
            assert abs(ks_statistic(a, b) - ks_enumerate(a, b)) <= 1e-15

    def test_p_value_against_series(self):
        # two-sided asymptotic tail at lambda = 1.36 is the classic 5 % point
        assert kolmogorov_sf(1.36) == pytest.approx(0.0494, abs=5e-4)
        assert kolmogorov_sf(1.63) == pytest.approx(0.0098, abs=5e-4)
        lam = np.linspace(0.2, 3, 50)
        q = [kolmogorov_sf(v) for v in lam]
        assert np.all(np.diff(q) <= 0)
        # the two series forms agree near their switch point
        assert kolmogorov_sf(0.999999) == pytest.approx(kolmogorov_sf(1.000001), abs=1e-5)

    def test_effective_n(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=40), rng.normal(0.5, 1, size=60)
        r = ks_two_sample(a, b)
        assert r.p_value == pytest.approx(kolmogorov_sf(np.sqrt(40 * 60 / 100) * r.d_statistic))
        assert (r.n1, r.n2) == (40, 60) and r.stars == stars_for(r.p_value)

    def test_empty(self):
        with pytest.raises(ValueError):
            ks_two_sample([], [1.0])


@pytest.mark.parametrize("p,stars", [(0.009, "***"), (0.049, "**"), (0.09, "*"), (0.5, ""), (0.10, ""), (0.05, "*")])
def test_stars(p, stars):
    assert stars_for(p) == stars


class TestTrend:
    years = np.arange(2003, 2021)

    def test_perfect_line(self):
        r = linear_trend(self.years, 0.1 * self.years + 5)
        assert r.slope == pytest.approx(0.1, rel=1e-9) and r.p_value < 1e-12 and r.significant_05

    def test_constant(self):
        r = linear_trend(self.years, np.full(18, 31.0))
        assert r.slope == 0 and r.p_value == 1 and not r.significant_05

    def test_power(self):
        rng = np.random.default_rng(2)
        t = self.years - self.years[0]
        hits = 0
        for _ in range(500):
            r = linear_trend(self.years, 0.05 * t + rng.normal(0, 0.1, size=18))
            hits += (0.03 <= r.slope <= 0.07) and r.p_value < 0.05
        assert hits >= 475

    def test_closed_form(self):
        rng = np.random.default_rng(3)
        y = rng.normal(size=18)
        r = linear_trend(self.years, y)
        A = np.column_stack([np.ones(18), self.years])
        coef = np.linalg.solve(A.T @ A, A.T @ y)
        assert r.intercept == pytest.approx(coef[0], rel=1e-10)
        assert r.slope == pytest.approx(coef[1], rel=1e-10)

    def test_against_scipy(self):
        from scipy.stats import linregress

        y = np.random.default_rng(4).normal(size=18) + 0.02 * self.years
        r, ref = linear_trend(self.years, y), linregress(self.years, y)
        assert r.p_value == pytest.approx(ref.pvalue, rel=1e-9)
        assert r.stderr == pytest.approx(ref.stderr, rel=1e-9)

    def test_degenerate(self):
        with pytest.raises(ValueError):
            linear_trend([1, 2], [1, 2])
        with pytest.raises(ValueError):
            linear_trend([5, 5, 5], [1, 2, 3])
        with pytest.raises(ValueError):
            linear_trend([1, 2, 3], [1, 2])


class TestEffects:
    def test_zero(self):
        e = effect_sizes(np.zeros((4, 2)), ["EVI", "NTL"], [1, 2, 3, 4], 1.0)
        assert all(x.r_sd == 0 and x.r_rmse == 0 for x in e)

    def test_hand(self):
        hi = np.array([28.0, 32.0])  # population sd 2
        phi = np.array([[0.5], [-0.5]])
        (e,) = effect_sizes(phi, ["EVI"], hi, 1.0)
        assert e.r_sd == pytest.approx(0.25) and e.r_rmse == pytest.approx(0.5)

    def test_errors(self):
        with pytest.raises(ValueError):
            effect_sizes(np.ones((2, 1)), ["A"], [3.0, 3.0], 1.0)
        with pytest.raises(ValueError):
            effect_sizes(np.ones((2, 1)), ["A"], [1.0, 3.0], 0.0)


class TestBootstrap:
    def test_equal_records(self):
        r = block_bootstrap(np.mean, {("c", 2003): [2.0, 2.0], ("c", 2004): [2.0]}, 200)
        assert r.low == r.high == r.estimate == 2.0

    def test_two_blocks(self):
        r = block_bootstrap(np.mean, {"a": [0.0, 0.0], "b": [10.0, 10.0]}, 4000, seed=1)
        vals, counts = np.unique(r.replicates, return_counts=True)
        assert vals.tolist() == [0.0, 5.0, 10.0]
        np.testing.assert_allclose(counts / 4000, [0.25, 0.5, 0.25], atol=0.03)
        assert r.low == 0.0 and r.high == 10.0

    def test_seeded(self):
        rec = {k: np.random.default_rng(k).normal(size=3) for k in range(6)}
        a, b = block_bootstrap(np.mean, rec, 300, seed=9), block_bootstrap(np.mean, rec, 300, seed=9)
        assert np.array_equal(a.replicates, b.replicates)

    def test_single_block(self):
        with pytest.raises(ValueError):
            block_bootstrap(np.mean, {"a": [1.0, 2.0]})

    def test_coverage(self):
        rng = np.random.default_rng(5)
        hits = 0
        for m in range(200):
            rec = {i: rng.normal(1.0, 1.0, size=5) for i in range(30)}
            r = block_bootstrap(np.mean, rec, 400, seed=m)
            hits += r.low <= 1.0 <= r.high
        assert 180 <= hits <= 198
