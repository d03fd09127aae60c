import itertools
import json

import numpy as np
import pytest

from urbanhi.explain_ale import h2_interaction, select_strongest_pair
from urbanhi.explain_shap import fit_explainer
from urbanhi.grid import read_grid
from urbanhi.heat_index import TaggedField, heat_index_grid, seasonal_mam_aggregate
from urbanhi.synth import (
    SyntheticSpecError,
    SyntheticWorldSpec,
    dewpoint_c,
    generate_synthetic_world,
    invert_hi_for_temperature,
    read_stations,
    write_world,
)
from urbanhi.trees import TrainParams

FEATURES = ["EVI", "LAI", "FPAR", "NTL", "LCZ_COMPACT", "LCZ_VEGETATED", "LCZ_OPEN"]
GREENING = ["EVI", "LAI", "FPAR", "NTL"]


@pytest.fixture(scope="module")
def world():
    return generate_synthetic_world(SyntheticWorldSpec(rows=40, cols=48, n_stations=25))


class TestSpec:
    def test_minimum_size(self):
        with pytest.raises(SyntheticSpecError):
            SyntheticWorldSpec(rows=31)

    def test_other_invalid(self):
        with pytest.raises(SyntheticSpecError):
            SyntheticWorldSpec(noise_sigma=-1)
        with pytest.raises(SyntheticSpecError):
            SyntheticWorldSpec(years=())

    def test_dict_round_trip(self):
        s = SyntheticWorldSpec(rows=33, years=(2010, 2011), c_evi_fpar=1.5)
        assert SyntheticWorldSpec.from_dict(s.to_dict()) == s


class TestWorld:
    def test_layers(self, world):
        yf = world.years[2003]
        assert yf.stack.names == ["LST", "WSA", "POP", "RAD", "DPT", "IMP", "DCOAST", "LAT", "LON"]
        assert yf.explain_stack.names == FEATURES
        assert yf.stack.header.shape == (40, 48)
        assert yf.stack.joint_valid_mask.all()

    def test_deterministic(self, world):
        again = generate_synthetic_world(world.spec)
        for y in world.years:
            assert np.array_equal(again.years[y].target.values, world.years[y].target.values)
            assert np.array_equal(again.years[y].explain_stack["EVI"].values, world.years[y].explain_stack["EVI"].values)

    def test_hi_stage_reproduces_target(self, world):
        for yf in world.years.values():
            his = [TaggedField(heat_index_grid(t, rh), m, ts) for (t, m, ts), (rh, _, _) in zip(yf.t_fields, yf.rh_fields)]
            hi = seasonal_mam_aggregate(his, "mean")
            assert np.max(np.abs(hi.values - yf.target.values)) < 1e-9

    def test_noise_level(self, world):
        eps = np.concatenate([(yf.target.values - yf.hi_true.values).ravel() for yf in world.years.values()])
        assert abs(eps.std() - 1.0) < 0.05 and abs(eps.mean()) < 0.05

    def test_noiseless(self):
        w = generate_synthetic_world(SyntheticWorldSpec(rows=32, cols=32, years=(2003,), noise_sigma=0.0))
        yf = w.years[2003]
        assert np.array_equal(yf.target.values, yf.hi_true.values)

    def test_timestamps_in_daytime_window(self, world):
        for yf in world.years.values():
            assert len(yf.t_fields) == 6
            for _, m, ts in yf.t_fields:
                assert m in ("Mar", "Apr", "May") and 12 <= int(ts[11:13]) <= 16

    def test_regions_and_cities(self, world):
        codes = world.regions.codes
        assert len(world.cities) == 6
        for c in world.cities:
            assert codes[c.row, c.col] == c.city_id * 10 + 1
            assert c.climate in ("Aw", "Cwa", "BSh") and c.density in ("H", "L")
        assert (codes > 0).any() and (codes <= 0).any()

    def test_stations(self, world):
        assert len(world.stations) == 25 * 3
        res = []
        for s in world.stations:
            cell = world.header.cell_of(s.lat, s.lon)
            assert cell is not None
            res.append(s.observed_hi - world.years[s.year].hi_true.values[cell])
        assert abs(np.std(res) - 1.0) < 0.25

    def test_temperature_inversion(self):
        rh = np.array([20.0, 50.0, 80.0])
        t0 = np.array([34.0, 35.0, 36.0])
        from urbanhi.synth import _hi_c

        t = invert_hi_for_temperature(_hi_c(t0, rh) + 1.3, rh, t0)
        np.testing.assert_allclose(_hi_c(t, rh), _hi_c(t0, rh) + 1.3, atol=1e-9)

    def test_dewpoint(self):
        assert dewpoint_c(np.array([25.0]), np.array([100.0]))[0] == pytest.approx(25.0, abs=1e-9)
        assert dewpoint_c(np.array([30.0]), np.array([50.0]))[0] == pytest.approx(18.4, abs=0.2)


def test_write_world(tmp_path, world):
    inputs = write_world(world, tmp_path)
    y = inputs["years"]["2004"]
    assert len(y["t_fields"]) == len(y["rh_fields"]) == 6
    g = read_grid(tmp_path / y["stack"]["LST"])
    assert np.allclose(g.values, world.years[2004].stack["LST"].values, atol=1e-4)
    meta = json.loads((tmp_path / "world.json").read_text())
    assert "z(EVI) * z(FPAR)" in meta["equation"] and meta["spec"]["rows"] == 40
    assert len(read_stations(tmp_path / inputs["stations"])) == 75


def yearly_h2(spec, years=None, trees=60):
    w = generate_synthetic_world(spec)
    out = {}
    for y in years or spec.years:
        yf = w.years[y]
        X = yf.explain_stack.matrix(FEATURES)
        m = fit_explainer(X, yf.hi_true.values.ravel(), FEATURES, TrainParams(seed=1), n_estimators=trees)
        for p in itertools.combinations(GREENING, 2):
            out.setdefault(p, []).append(h2_interaction(m, X, p, 200, 0, FEATURES).h2)
    return out


@pytest.mark.slow
def test_no_interaction_gives_small_h2():
    s = yearly_h2(SyntheticWorldSpec(c_evi_fpar=0.0), years=[2003])
    assert s[("EVI", "FPAR")][0] < 0.05


@pytest.mark.slow
def test_strong_interaction_selects_evi_fpar():
    s = yearly_h2(SyntheticWorldSpec(c_evi_fpar=2.0, b_evi=0.1, b_fpar=0.1, b_lai=0.05))
    assert select_strongest_pair(s).pair == ("EVI", "FPAR")
