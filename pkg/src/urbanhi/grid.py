"""Raster data model, resampling, masking and per-season normalization.

Grids are plate carree lat/lon rasters. Coordinates refer to cell centers and
row 0 is the northernmost row. Invalid cells always read as NaN.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Mapping

import numpy as np

NODATA_CODE = -32768


class GridError(ValueError):
    """Malformed grid, header mismatch or bad file payload."""


class DomainError(ValueError):
    """Input outside the domain an operation is defined on."""


class ZeroVarianceError(GridError):
    pass


def _close(a: float, b: float, rel: float = 1e-9) -> bool:
    return abs(a - b) <= rel * max(abs(a), abs(b), 1.0)


@dataclass(frozen=True)
class GridHeader:
    rows: int
    cols: int
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    cell_size: float
    nodata_is_nan: bool = True

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise GridError(f"grid must have rows, cols >= 1, got {self.rows}x{self.cols}")
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise GridError("lat_max > lat_min and lon_max > lon_min required")
        if self.cell_size <= 0:
            raise GridError("cell_size must be positive")
        if not _close(self.lat_max - self.lat_min, self.rows * self.cell_size):
            raise GridError("latitude extent does not equal rows * cell_size")
        if not _close(self.lon_max - self.lon_min, self.cols * self.cell_size):
            raise GridError("longitude extent does not equal cols * cell_size")

    @classmethod
    def from_origin(cls, lat_max: float, lon_min: float, cell_size: float, rows: int, cols: int) -> "GridHeader":
        return cls(
            rows=rows,
            cols=cols,
            lat_min=lat_max - rows * cell_size,
            lat_max=lat_max,
            lon_min=lon_min,
            lon_max=lon_min + cols * cell_size,
            cell_size=cell_size,
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def size(self) -> int:
        return self.rows * self.cols

    def center_lats(self) -> np.ndarray:
        return self.lat_max - (np.arange(self.rows) + 0.5) * self.cell_size

    def center_lons(self) -> np.ndarray:
        return self.lon_min + (np.arange(self.cols) + 0.5) * self.cell_size

    def cell_of(self, lat: float, lon: float) -> tuple[int, int] | None:
        """Containing cell of a point, or None outside the footprint."""
        if not (self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max):
            return None
        r = min(int((self.lat_max - lat) / self.cell_size), self.rows - 1)
        c = min(int((lon - self.lon_min) / self.cell_size), self.cols - 1)
        return r, c

    def overlaps(self, other: "GridHeader") -> bool:
        return (
            self.lat_min < other.lat_max
            and other.lat_min < self.lat_max
            and self.lon_min < other.lon_max
            and other.lon_min < self.lon_max
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NormalizationRecord:
    feature: str
    mean: float
    std: float
    year: int | None = None
    season: str | None = None

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.mean) / self.std

    def invert(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormalizationRecord":
        return cls(d["feature"], float(d["mean"]), float(d["std"]), d.get("year"), d.get("season"))


@dataclass(frozen=True, eq=False)
class Grid:
    """A single-variable raster. ``values`` is (rows, cols) float64 with NaN at invalid cells."""

    header: GridHeader
    values: np.ndarray
    units: str = ""
    normalization: NormalizationRecord | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim == 1 and v.size == self.header.size:
            v = v.reshape(self.header.shape)
        if v.shape != self.header.shape:
            raise GridError(f"values shape {v.shape} does not match header {self.header.shape}")
        v[~np.isfinite(v)] = np.nan
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.values)

    @classmethod
    def from_mask(cls, header: GridHeader, values: np.ndarray, mask: np.ndarray, units: str = "") -> "Grid":
        v = np.where(np.asarray(mask, dtype=bool), values, np.nan)
        return cls(header, v, units)

    def with_values(self, values: np.ndarray, units: str | None = None) -> "Grid":
        return Grid(self.header, values, self.units if units is None else units)


@dataclass(frozen=True, eq=False)
class CategoricalGrid:
    header: GridHeader
    codes: np.ndarray
    legend: dict = field(default_factory=dict)

    def __post_init__(self):
        c = np.array(self.codes, dtype=np.int16)
        if c.ndim == 1 and c.size == self.header.size:
            c = c.reshape(self.header.shape)
        if c.shape != self.header.shape:
            raise GridError(f"codes shape {c.shape} does not match header {self.header.shape}")
        legend = {int(k): str(v) for k, v in self.legend.items()}
        unknown = set(np.unique(c).tolist()) - set(legend) - {NODATA_CODE}
        if legend and unknown:
            raise GridError(f"codes {sorted(unknown)} missing from legend")
        c.setflags(write=False)
        object.__setattr__(self, "codes", c)
        object.__setattr__(self, "legend", legend)

    @property
    def valid_mask(self) -> np.ndarray:
        return self.codes != NODATA_CODE


@dataclass(frozen=True, eq=False)
class FeatureStack:
    """Co-registered named predictor layers sharing one header."""

    header: GridHeader
    layers: dict

    @property
    def names(self) -> list[str]:
        return list(self.layers)

    @property
    def joint_valid_mask(self) -> np.ndarray:
        mask = np.ones(self.header.shape, dtype=bool)
        for g in self.layers.values():
            mask &= g.valid_mask
        return mask

    def __getitem__(self, name: str) -> Grid:
        return self.layers[name]

    def subset(self, names) -> "FeatureStack":
        missing = [n for n in names if n not in self.layers]
        if missing:
            raise GridError(f"stack has no layer(s) {missing}")
        return FeatureStack(self.header, {n: self.layers[n] for n in names})

    def matrix(self, names=None, mask: np.ndarray | None = None) -> np.ndarray:
        """Pixels of ``mask`` (row-major) by layer, as a float64 table."""
        names = self.names if names is None else list(names)
        mask = self.joint_valid_mask if mask is None else mask
        return np.column_stack([self.layers[n].values[mask] for n in names]) if names else np.empty((int(mask.sum()), 0))


def align_stack(grids: Mapping[str, Grid]) -> FeatureStack:
    if not grids:
        raise GridError("cannot build a stack from zero layers")
    items = list(grids.items())
    ref_name, ref = items[0]
    for name, g in items[1:]:
        if g.header != ref.header:
            raise GridError(f"layer {name!r} header differs from {ref_name!r}")
    return FeatureStack(ref.header, dict(items))


# ---------------------------------------------------------------------------
# resampling


def _fractional_index(src: GridHeader, target: GridHeader) -> tuple[np.ndarray, np.ndarray]:
    # fractional row/col position of target centers in src center-index space
    fr = (src.lat_max - target.center_lats()) / src.cell_size - 0.5
    fc = (target.center_lons() - src.lon_min) / src.cell_size - 0.5
    return fr, fc


def _inside(src: GridHeader, target: GridHeader) -> tuple[np.ndarray, np.ndarray]:
    lats, lons = target.center_lats(), target.center_lons()
    in_r = (lats >= src.lat_min) & (lats <= src.lat_max)
    in_c = (lons >= src.lon_min) & (lons <= src.lon_max)
    return in_r, in_c


def _axis_stencil(f: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    if n == 1:
        return np.zeros(f.shape, dtype=np.int64), np.zeros(f.shape)
    i0 = np.clip(np.floor(f).astype(np.int64), 0, n - 2)
    # weights may leave [0, 1] by up to half a cell at the footprint rim (linear extrapolation)
    return i0, f - i0


def resample_bilinear(src: Grid, target: GridHeader) -> Grid:
    """Bilinear resampling of a continuous raster onto ``target``.

    Any NaN inside a target cell's 4-cell stencil makes that cell NaN.
    Target centers inside the source footprint but outside the hull of source
    centers are extrapolated linearly from the edge stencil.
    """
    h = src.header
    if not h.overlaps(target):
        raise DomainError("source and target footprints are disjoint")
    in_r, in_c = _inside(h, target)
    if h.rows == 1 and h.cols == 1:
        out = np.full(target.shape, src.values[0, 0])
        out[~(in_r[:, None] & in_c[None, :])] = np.nan
        return Grid(target, out, src.units)

    fr, fc = _fractional_index(h, target)
    r0, tr = _axis_stencil(fr, h.rows)
    c0, tc = _axis_stencil(fc, h.cols)
    r1 = np.minimum(r0 + 1, h.rows - 1)
    c1 = np.minimum(c0 + 1, h.cols - 1)
    v = src.values
    R0, C0 = np.meshgrid(r0, c0, indexing="ij")
    R1, C1 = np.meshgrid(r1, c1, indexing="ij")
    TR, TC = np.meshgrid(tr, tc, indexing="ij")
    out = (
        v[R0, C0] * (1 - TR) * (1 - TC)
        + v[R0, C1] * (1 - TR) * TC
        + v[R1, C0] * TR * (1 - TC)
        + v[R1, C1] * TR * TC
    )
    # NaN * 0 weight is still NaN, so a poisoned stencil propagates by itself;
    # explicit mask keeps that true even if the formula changes
    poisoned = ~(np.isfinite(v[R0, C0]) & np.isfinite(v[R0, C1]) & np.isfinite(v[R1, C0]) & np.isfinite(v[R1, C1]))
    out[poisoned] = np.nan
    out[~(in_r[:, None] & in_c[None, :])] = np.nan
    return Grid(target, out, src.units)


def _nearest_index(f: np.ndarray, n: int) -> np.ndarray:
    # round half toward the lower index
    return np.clip(np.ceil(f - 0.5 - 1e-12).astype(np.int64), 0, n - 1)


def resample_nearest(src: CategoricalGrid, target: GridHeader) -> CategoricalGrid:
    h = src.header
    if not h.overlaps(target):
        raise DomainError("source and target footprints are disjoint")
    fr, fc = _fractional_index(h, target)
    ri = _nearest_index(fr, h.rows)
    ci = _nearest_index(fc, h.cols)
    out = src.codes[np.ix_(ri, ci)].copy()
    in_r, in_c = _inside(h, target)
    out[~(in_r[:, None] & in_c[None, :])] = NODATA_CODE
    return CategoricalGrid(target, out, src.legend)


# ---------------------------------------------------------------------------
# normalization


def zscore_normalize(grid: Grid, year: int | None = None, season: str | None = None,
                     feature: str = "") -> tuple[Grid, NormalizationRecord]:
    """Standardize valid cells to zero mean and unit population std."""
    vals = grid.values[grid.valid_mask]
    if vals.size < 2 or np.all(vals == vals[0]):
        raise ZeroVarianceError(f"zero variance in {feature or 'grid'}")
    mean = float(vals.mean())
    std = float(vals.std())
    if std == 0.0:
        raise ZeroVarianceError(f"zero variance in {feature or 'grid'}")
    rec = NormalizationRecord(feature, mean, std, year, season)
    return Grid(grid.header, rec.apply(grid.values), "z", rec), rec


def denormalize(grid: Grid, record: NormalizationRecord, units: str = "") -> Grid:
    return Grid(grid.header, record.invert(grid.values), units)


# ---------------------------------------------------------------------------
# file format: <stem>.f32 / <stem>.i16 payload + <stem>.json sidecar


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".f32", ".i16") else p


def write_grid(grid: Grid, path) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    payload = grid.values.astype("<f4")
    stem.with_suffix(".f32").write_bytes(payload.tobytes(order="C"))
    meta = {"kind": "continuous", "header": grid.header.to_dict(), "units": grid.units}
    if grid.normalization is not None:
        meta["normalization"] = grid.normalization.to_dict()
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return stem


def _read_meta(stem: Path) -> dict:
    sidecar = stem.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing grid sidecar {sidecar}")
    return json.loads(sidecar.read_text())


def read_grid(path) -> Grid:
    stem = _stem(path)
    meta = _read_meta(stem)
    header = GridHeader(**meta["header"])
    raw = stem.with_suffix(".f32").read_bytes()
    if len(raw) != header.size * 4:
        raise GridError(f"{stem}.f32 holds {len(raw)} bytes, expected {header.size * 4}")
    values = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(header.shape)
    norm = meta.get("normalization")
    return Grid(header, values, meta.get("units", ""), NormalizationRecord.from_dict(norm) if norm else None)


def write_categorical(grid: CategoricalGrid, path) -> Path:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".i16").write_bytes(grid.codes.astype("<i2").tobytes(order="C"))
    meta = {
        "kind": "categorical",
        "header": grid.header.to_dict(),
        "legend": {str(k): v for k, v in sorted(grid.legend.items())},
        "nodata_code": NODATA_CODE,
    }
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return stem


def read_categorical(path) -> CategoricalGrid:
    stem = _stem(path)
    meta = _read_meta(stem)
    header = GridHeader(**meta["header"])
    raw = stem.with_suffix(".i16").read_bytes()
    if len(raw) != header.size * 2:
        raise GridError(f"{stem}.i16 holds {len(raw)} bytes, expected {header.size * 2}")
    codes = np.frombuffer(raw, dtype="<i2").reshape(header.shape)
    return CategoricalGrid(header, codes, {int(k): v for k, v in meta.get("legend", {}).items()})


def categorical_fractions(grid: CategoricalGrid, target: GridHeader) -> dict:
    """Fractional cover of each legend class on a coarser target grid.

    Each source cell is counted in the target cell containing its center; used
    to turn LCZ classes into fractional-cover layers.
    """
    h = grid.header
    lat, lon = cell_center_grid(h)
    tr = np.floor((target.lat_max - lat) / target.cell_size).astype(np.int64)
    tc = np.floor((lon - target.lon_min) / target.cell_size).astype(np.int64)
    ok = (tr >= 0) & (tr < target.rows) & (tc >= 0) & (tc < target.cols) & grid.valid_mask
    flat = tr[ok] * target.cols + tc[ok]
    codes = grid.codes[ok]
    total = np.bincount(flat, minlength=target.size).reshape(target.shape).astype(np.float64)
    out = {}
    for code, label in sorted(grid.legend.items()):
        n = np.bincount(flat[codes == code], minlength=target.size).reshape(target.shape)
        with np.errstate(invalid="ignore", divide="ignore"):
            out[label] = Grid(target, np.where(total > 0, n / total, np.nan), "fraction")
    return out


def cell_center_grid(header: GridHeader) -> tuple[np.ndarray, np.ndarray]:
    """(lat, lon) of every cell center as two (rows, cols) arrays."""
    return np.meshgrid(header.center_lats(), header.center_lons(), indexing="ij")
