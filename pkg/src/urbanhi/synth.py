"""Synthetic desk-scale world: predictor layers, T/RH fields, HI truth, cities and stations.

Generative equations (all fields on one lat/lon grid, z(.) = domain z-score):

    greening  G   = -b_evi * z(EVI) - b_fpar * z(FPAR) + c * z(EVI) * z(FPAR) - b_lai * z(LAI)
    LST       = 36 + 2.5 z(IMP) + 0.8 z(RAD_y) + 1.5 G - 0.5 z(WSA) + 1.2 * lat_grad
    T_m       = 35.0 + dT_m + trend * (year - base_year) + 0.5 (LST - 36) + 0.4 z(IMP) - 1.0 coast_decay
    RH_m      = 32 + dRH_m + 28 coast_decay + 3 z(LAI) (clipped to [15, 84])
    HI_m      = NWS heat index of (T_m, RH_m), deg C
    HI_true   = mean over months of HI_m
    target    = HI_true + eps, eps ~ N(0, noise_sigma) per pixel and year

where coast_decay = exp(-DCOAST / 60 km). The noise is folded back into the
temperature fields (per pixel, by inverting HI in T) so the HI stage of the
pipeline reproduces ``target`` from the T/RH fields alone.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .grid import CategoricalGrid, FeatureStack, Grid, GridHeader, cell_center_grid, write_categorical, write_grid
from .heat_index import celsius_to_fahrenheit, fahrenheit_to_celsius, heat_index_f_array

MONTHS = ("Mar", "Apr", "May")
MONTH_DT = {"Mar": -1.5, "Apr": 0.0, "May": 1.5}
MONTH_DRH = {"Mar": -4.0, "Apr": 0.0, "May": 4.0}
CLASSES = ("Aw", "Cwa", "BSh")
LCZ_LEGEND = {1: "compact", 2: "open", 3: "vegetated"}


class SyntheticSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticWorldSpec:
    rows: int = 64
    cols: int = 64
    years: tuple = (2003, 2004, 2005)
    noise_sigma: float = 1.0
    b_evi: float = 0.6
    b_fpar: float = 0.6
    b_lai: float = 0.2
    c_evi_fpar: float = 0.9
    trend_per_year: float = 0.05
    fields_per_month: int = 2
    n_cities: int = 6
    n_stations: int = 40
    cell_size: float = 0.01
    lat_max: float = 23.0
    lon_min: float = 72.0
    seed: int = 11

    def __post_init__(self):
        if self.rows < 32 or self.cols < 32:
            raise SyntheticSpecError(f"synthetic world must be at least 32x32, got {self.rows}x{self.cols}")
        if self.noise_sigma < 0:
            raise SyntheticSpecError("noise_sigma must be >= 0")
        if not self.years:
            raise SyntheticSpecError("at least one year is required")

    @classmethod
    def from_dict(cls, d: dict | None) -> "SyntheticWorldSpec":
        d = dict(d or {})
        if "years" in d:
            d["years"] = tuple(int(y) for y in d["years"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["years"] = list(self.years)
        return d

    @property
    def header(self) -> GridHeader:
        return GridHeader.from_origin(self.lat_max, self.lon_min, self.cell_size, self.rows, self.cols)


def _z(a: np.ndarray) -> np.ndarray:
    sd = a.std()
    return (a - a.mean()) / (sd if sd > 0 else 1.0)


def _bumps(rng: np.random.Generator, shape, n: int, width: tuple = (0.08, 0.25)) -> np.ndarray:
    """Sum of random Gaussian bumps on the unit square, rescaled to [0, 1]."""
    r, c = shape
    yy, xx = np.meshgrid((np.arange(r) + 0.5) / r, (np.arange(c) + 0.5) / c, indexing="ij")
    out = np.zeros(shape)
    for _ in range(n):
        cy, cx = rng.uniform(0, 1, 2)
        w = rng.uniform(*width)
        a = rng.uniform(0.5, 1.0) * rng.choice([-1.0, 1.0])
        out += a * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * w * w))
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def dewpoint_c(t_c: np.ndarray, rh: np.ndarray) -> np.ndarray:
    """Magnus-formula dew point (deg C)."""
    g = np.log(np.clip(rh, 1e-6, None) / 100.0) + 17.625 * t_c / (243.04 + t_c)
    return 243.04 * g / (17.625 - g)


def _hi_c(t_c, rh):
    return fahrenheit_to_celsius(heat_index_f_array(celsius_to_fahrenheit(t_c), rh))


def invert_hi_for_temperature(target_hi_c: np.ndarray, rh: np.ndarray, t_guess: np.ndarray, span: float = 15.0) -> np.ndarray:
    """Temperature (deg C) whose heat index at ``rh`` equals ``target_hi_c``, by bisection.

    Assumes HI increases with T on [t_guess - span, t_guess + span], which holds
    for the Rothfusz branch at the humidities the generator produces.
    """
    lo = t_guess - span
    hi = t_guess + span
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        above = _hi_c(mid, rh) > target_hi_c
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid)
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class City:
    city_id: int
    name: str
    row: int
    col: int
    core_radius: float
    climate: str
    density: str = "H"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StationRecord:
    station_id: str
    lat: float
    lon: float
    year: int
    observed_hi: float


@dataclass(eq=False)
class YearFields:
    year: int
    stack: FeatureStack          # canonical downscaling layers
    explain_stack: FeatureStack  # greening / urban-form layers
    t_fields: list               # [(Grid, month, timestamp)]
    rh_fields: list
    hi_true: Grid
    target: Grid


@dataclass(eq=False)
class SyntheticWorld:
    spec: SyntheticWorldSpec
    header: GridHeader
    years: dict
    cities: list
    regions: CategoricalGrid
    stations: list
    equation: str = __doc__

    @property
    def region_mask(self) -> np.ndarray:
        return self.regions.codes > 0


def _cities(spec: SyntheticWorldSpec, rng: np.random.Generator, dcoast: np.ndarray, pop: np.ndarray) -> list[City]:
    r, c = spec.rows, spec.cols
    radius = max(2.0, min(r, c) / 14.0)
    margin = int(math.ceil(radius * math.sqrt(2))) + 1
    cities: list[tuple[int, int]] = []
    tries = 0
    while len(cities) < spec.n_cities and tries < 10000:
        tries += 1
        y, x = int(rng.integers(margin, r - margin)), int(rng.integers(margin, c - margin))
        if all((y - a) ** 2 + (x - b) ** 2 >= (3 * radius) ** 2 for a, b in cities):
            cities.append((y, x))
    order = sorted(range(len(cities)), key=lambda i: dcoast[cities[i]])
    out = []
    for rank, i in enumerate(order):
        y, x = cities[i]
        climate = CLASSES[min(len(CLASSES) - 1, rank * len(CLASSES) // max(1, len(cities)))]
        out.append(City(i + 1, f"C{i + 1:02d}", y, x, radius, climate))
    # density tier: above/below the class median of core population
    final = []
    for city in sorted(out, key=lambda k: k.city_id):
        peers = [pop[k.row, k.col] for k in out if k.climate == city.climate]
        tier = "H" if pop[city.row, city.col] >= np.median(peers) else "L"
        final.append(City(city.city_id, city.name, city.row, city.col, city.core_radius, city.climate, tier))
    return final


def _region_codes(spec: SyntheticWorldSpec, cities: list[City]) -> CategoricalGrid:
    yy, xx = np.meshgrid(np.arange(spec.rows), np.arange(spec.cols), indexing="ij")
    codes = np.zeros((spec.rows, spec.cols), dtype=np.int16)
    legend = {0: "outside"}
    for city in cities:
        d = np.sqrt((yy - city.row) ** 2 + (xx - city.col) ** 2)
        ring = (d <= city.core_radius * math.sqrt(2)) & (codes == 0)
        codes[ring] = city.city_id * 10 + 2
        core = d <= city.core_radius
        codes[core] = city.city_id * 10 + 1
        legend[city.city_id * 10 + 1] = f"{city.name}-core"
        legend[city.city_id * 10 + 2] = f"{city.name}-ring"
    return CategoricalGrid(spec.header, codes, legend)


def generate_synthetic_world(spec: SyntheticWorldSpec) -> SyntheticWorld:
    rng = np.random.default_rng(spec.seed)
    h = spec.header
    shape = h.shape
    lat, lon = cell_center_grid(h)
    km_per_deg = 111.0

    # static layers
    dcoast = (lon - h.lon_min) * km_per_deg * math.cos(math.radians(lat.mean())) + 20.0 * _bumps(rng, shape, 4)
    coast_decay = np.exp(-dcoast / 60.0)
    lat_grad = _z(lat)

    city_seed = rng.integers(2**31)
    urban_shape = _bumps(rng, shape, 8, (0.05, 0.15))
    pop0 = 200.0 + 8000.0 * urban_shape ** 2
    cities = _cities(spec, np.random.default_rng(city_seed), dcoast, pop0)
    yy, xx = np.meshgrid(np.arange(spec.rows), np.arange(spec.cols), indexing="ij")
    urban = 0.3 * urban_shape
    for city in cities:
        d2 = (yy - city.row) ** 2 + (xx - city.col) ** 2
        urban = urban + np.exp(-d2 / (2 * (1.2 * city.core_radius) ** 2))
    urban = np.clip(urban, 0, None)
    imp = np.clip(urban / urban.max() + 0.05 * rng.normal(size=shape), 0, 1)
    pop = 100.0 + 15000.0 * imp ** 1.5 + 300.0 * _bumps(rng, shape, 5)
    ntl = 2.0 + 60.0 * imp + 5.0 * _bumps(rng, shape, 6) + 1.5 * rng.normal(size=shape).clip(-2, 2)
    wsa = 0.12 + 0.1 * _bumps(rng, shape, 5) + 0.02 * imp

    # each greening layer gets mostly its own field so the forest cannot swap one for another
    green0 = _bumps(rng, shape, 10, (0.06, 0.2))
    green_a = _bumps(rng, shape, 30, (0.03, 0.1))
    green_b = _bumps(rng, shape, 30, (0.03, 0.1))
    green_c = _bumps(rng, shape, 30, (0.03, 0.1))
    regions = _region_codes(spec, cities)

    lcz_frac = {
        "LCZ_COMPACT": np.clip(imp * 1.1 - 0.1, 0, 1),
        "LCZ_VEGETATED": np.clip(green0 * (1 - imp), 0, 1),
    }
    lcz_frac["LCZ_OPEN"] = np.clip(1 - lcz_frac["LCZ_COMPACT"] - lcz_frac["LCZ_VEGETATED"], 0, 1)

    years = {}
    stations_xy = [(int(rng.integers(0, spec.rows)), int(rng.integers(0, spec.cols))) for _ in range(spec.n_stations)]
    stations: list[StationRecord] = []
    for y in spec.years:
        yrng = np.random.default_rng([spec.seed, int(y)])
        wig = [0.08 * (_bumps(yrng, shape, 6) - 0.5) for _ in range(3)]
        evi = np.clip(0.1 + 0.6 * (0.1 * green0 + 0.9 * green_a) * (1 - 0.3 * imp) + wig[0], 0.02, 0.9)
        fpar = np.clip(0.1 + 0.7 * (0.1 * green0 + 0.9 * green_b) * (1 - 0.3 * imp) + wig[1], 0.01, 0.95)
        lai = np.clip(0.2 + 4.0 * (0.1 * green0 + 0.9 * green_c) * (1 - 0.3 * imp) + 2 * wig[2], 0.05, 6.0)
        rad = 210.0 + 25.0 * _bumps(yrng, shape, 4) + 3.0 * (y - spec.years[0])

        ze, zf, zl = _z(evi), _z(fpar), _z(lai)
        greening = -spec.b_evi * ze - spec.b_fpar * zf + spec.c_evi_fpar * ze * zf - spec.b_lai * zl
        lst = 36.0 + 2.5 * _z(imp) + 0.8 * _z(rad) + 1.5 * greening - 0.5 * _z(wsa) + 1.2 * lat_grad

        t_fields, rh_fields, hi_months, t_months, rh_months = [], [], [], [], []
        eps = yrng.normal(0.0, spec.noise_sigma, size=shape) if spec.noise_sigma > 0 else np.zeros(shape)
        for m in MONTHS:
            t_m = (35.0 + MONTH_DT[m] + spec.trend_per_year * (y - spec.years[0]) + 0.5 * (lst - 36.0)
                   + 0.4 * _z(imp) - 1.0 * coast_decay)
            rh_m = np.clip(32.0 + MONTH_DRH[m] + 28.0 * coast_decay + 3.0 * zl, 15.0, 84.0)
            hi_m = _hi_c(t_m, rh_m)
            t_months.append(t_m)
            rh_months.append(rh_m)
            hi_months.append(hi_m)
            # noise enters through temperature so that HI(T', RH) = HI + eps in every field
            t_noisy = invert_hi_for_temperature(hi_m + eps, rh_m, t_m) if spec.noise_sigma > 0 else t_m
            for k in range(spec.fields_per_month):
                # daytime composites inside the 12:00-16:00 exposure window
                ts = f"{y}-{MONTHS.index(m) + 3:02d}-{(10 * k) % 28 + 5:02d}T{12 + (2 * k) % 5:02d}:00"
                t_fields.append((Grid(h, t_noisy, "degC"), m, ts))
                rh_fields.append((Grid(h, rh_m, "percent"), m, ts))
        hi_true = np.mean(hi_months, axis=0)
        target = hi_true + eps
        t_mean = np.mean(t_months, axis=0)
        rh_mean = np.mean(rh_months, axis=0)
        dpt = dewpoint_c(t_mean, rh_mean)

        layers = {
            "LST": lst, "WSA": wsa, "POP": pop, "RAD": rad, "DPT": dpt, "IMP": imp,
            "DCOAST": dcoast, "LAT": lat, "LON": lon,
        }
        units = {"LST": "degC", "WSA": "unitless", "POP": "persons/km2", "RAD": "W/m2", "DPT": "degC",
                 "IMP": "fraction", "DCOAST": "km", "LAT": "deg", "LON": "deg"}
        stack = FeatureStack(h, {k: Grid(h, v, units[k]) for k, v in layers.items()})
        ex_layers = {"EVI": evi, "LAI": lai, "FPAR": fpar, "NTL": ntl, **lcz_frac}
        explain_stack = FeatureStack(h, {k: Grid(h, v, "") for k, v in ex_layers.items()})
        years[int(y)] = YearFields(int(y), stack, explain_stack, t_fields, rh_fields,
                                   Grid(h, hi_true, "degC"), Grid(h, target, "degC"))

        srng = np.random.default_rng([spec.seed, int(y), 99])
        for i, (r, c) in enumerate(stations_xy):
            obs = hi_true[r, c] + srng.normal(0.0, 1.0)
            stations.append(StationRecord(f"S{i:03d}", float(lat[r, c]), float(lon[r, c]), int(y), float(obs)))

    return SyntheticWorld(spec, h, years, cities, regions, stations)


def write_stations(records, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station_id", "lat", "lon", "year", "observed_hi"])
        for s in records:
            w.writerow([s.station_id, repr(s.lat), repr(s.lon), s.year, repr(s.observed_hi)])
    return path


def read_stations(path) -> list[StationRecord]:
    with Path(path).open(newline="") as fh:
        return [
            StationRecord(row["station_id"], float(row["lat"]), float(row["lon"]), int(row["year"]),
                          float(row["observed_hi"]))
            for row in csv.DictReader(fh)
        ]


def write_world(world: SyntheticWorld, directory) -> dict:
    """Write every synthetic input to ``directory``; return the config ``inputs`` section.

    Paths in the returned mapping are relative to ``directory``.
    """
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    years = {}
    for y, yf in sorted(world.years.items()):
        base = Path(str(y))
        t_list, rh_list = [], []
        for i, ((tg, m, ts), (rg, _, _)) in enumerate(zip(yf.t_fields, yf.rh_fields)):
            t_rel = base / "fields" / f"t_{m}_{i:02d}.f32"
            rh_rel = base / "fields" / f"rh_{m}_{i:02d}.f32"
            write_grid(tg, root / t_rel)
            write_grid(rg, root / rh_rel)
            t_list.append({"path": t_rel.as_posix(), "month": m, "timestamp": ts})
            rh_list.append({"path": rh_rel.as_posix(), "month": m, "timestamp": ts})
        stack = {}
        for name in yf.stack.names:
            rel = base / "stack" / f"{name}.f32"
            write_grid(yf.stack[name], root / rel)
            stack[name] = rel.as_posix()
        explain = {}
        for name in yf.explain_stack.names:
            rel = base / "explain" / f"{name}.f32"
            write_grid(yf.explain_stack[name], root / rel)
            explain[name] = rel.as_posix()
        write_grid(yf.hi_true, root / base / "truth" / "hi_true.f32")
        years[str(y)] = {"t_fields": t_list, "rh_fields": rh_list, "stack": stack, "explain_stack": explain}

    write_categorical(world.regions, root / "regions.i16")
    (root / "cities.json").write_text(json.dumps([c.to_dict() for c in world.cities], indent=2, sort_keys=True))
    write_stations(world.stations, root / "stations.csv")
    (root / "world.json").write_text(json.dumps(
        {"spec": world.spec.to_dict(), "equation": world.equation.strip()}, indent=2, sort_keys=True))
    return {"years": years, "regions": "regions.i16", "cities": "cities.json", "stations": "stations.csv"}
