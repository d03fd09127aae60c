"""NOAA/NWS Heat Index (Rothfusz regression with humidity adjustments).

Temperatures inside the algorithm are in degrees Fahrenheit and relative
humidity in percent. Grid-level helpers take and return Celsius.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, asdict
from typing import Iterable, Sequence

import numpy as np

from .grid import DomainError, Grid, GridError

# Rothfusz regression coefficients, in the order of the polynomial terms
# 1, T, RH, T*RH, T^2, RH^2, T^2*RH, T*RH^2, T^2*RH^2
ROTHFUSZ = (
    -42.379,
    2.04901523,
    10.14333127,
    -0.22475541,
    -0.00683783,
    -0.05481717,
    0.00122874,
    0.00085282,
    -0.00000199,
)

SCREEN_F = 80.0
MAM_MONTHS = {3: "Mar", 4: "Apr", 5: "May"}
_MONTH_NAMES = {"mar": 3, "march": 3, "apr": 4, "april": 4, "may": 5}


def celsius_to_fahrenheit(t_c):
    return 1.8 * t_c + 32.0


def fahrenheit_to_celsius(t_f):
    return (t_f - 32.0) / 1.8


@dataclass(frozen=True)
class HiBreakdown:
    hi_simple_f: float
    hi_test_f: float
    used_full_regression: bool
    adjustment_f: float
    hi_f: float
    hi_c: float
    valid: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def _simple(t_f, rh):
    return 0.5 * (t_f + 61.0 + 1.2 * (t_f - 68.0) + 0.094 * rh)


def _rothfusz(t, rh):
    c = ROTHFUSZ
    return (
        c[0]
        + c[1] * t
        + c[2] * rh
        + c[3] * t * rh
        + c[4] * t * t
        + c[5] * rh * rh
        + c[6] * t * t * rh
        + c[7] * t * rh * rh
        + c[8] * t * t * rh * rh
    )


def _low_rh_window(t_f, rh):
    return (rh < 13.0) & (t_f >= 80.0) & (t_f <= 112.0)


def _high_rh_window(t_f, rh):
    return (rh > 85.0) & (t_f >= 80.0) & (t_f <= 87.0)


def heat_index_f(t_f: float, rh: float) -> HiBreakdown:
    """Heat index in deg F for one (temperature, humidity) pair, with intermediates."""
    t_f = float(t_f)
    rh = float(rh)
    if math.isnan(t_f) or math.isnan(rh):
        nan = float("nan")
        return HiBreakdown(nan, nan, False, 0.0, nan, nan, valid=False)
    if not math.isfinite(t_f):
        raise DomainError(f"temperature must be finite, got {t_f}")
    if not 0.0 <= rh <= 100.0:
        raise DomainError(f"relative humidity {rh} outside [0, 100]")

    simple = _simple(t_f, rh)
    test = (simple + t_f) / 2.0
    if test < SCREEN_F:
        return HiBreakdown(simple, test, False, 0.0, simple, fahrenheit_to_celsius(simple))

    hi = _rothfusz(t_f, rh)
    adj = 0.0
    if _low_rh_window(t_f, rh):
        adj = -((13.0 - rh) / 4.0) * math.sqrt((17.0 - abs(t_f - 95.0)) / 17.0)
    elif _high_rh_window(t_f, rh):
        adj = ((rh - 85.0) / 10.0) * ((87.0 - t_f) / 5.0)
    hi += adj
    return HiBreakdown(simple, test, True, adj, hi, fahrenheit_to_celsius(hi))


def heat_index_f_array(t_f, rh) -> np.ndarray:
    """Vectorized heat index in deg F. NaN in either input gives NaN."""
    t_f = np.asarray(t_f, dtype=np.float64)
    rh = np.asarray(rh, dtype=np.float64)
    ok = np.isfinite(t_f) & np.isfinite(rh)
    if np.any(ok & ((rh < 0) | (rh > 100))):
        raise DomainError("relative humidity outside [0, 100]")
    simple = _simple(t_f, rh)
    test = (simple + t_f) / 2.0
    full = _rothfusz(t_f, rh)
    low = _low_rh_window(t_f, rh)
    high = _high_rh_window(t_f, rh)
    with np.errstate(invalid="ignore"):
        d_low = ((13.0 - rh) / 4.0) * np.sqrt(np.where(low, (17.0 - np.abs(t_f - 95.0)) / 17.0, 0.0))
    d_high = ((rh - 85.0) / 10.0) * ((87.0 - t_f) / 5.0)
    full = full - np.where(low, d_low, 0.0) + np.where(high & ~low, d_high, 0.0)
    out = np.where(test < SCREEN_F, simple, full)
    return np.where(ok, out, np.nan)


def heat_index_grid(t_grid: Grid, rh_grid: Grid) -> Grid:
    """Per-pixel heat index (deg C) from air temperature (deg C) and RH (%) grids."""
    if t_grid.header != rh_grid.header:
        raise GridError("temperature and humidity grids are not aligned")
    hi_f = heat_index_f_array(celsius_to_fahrenheit(t_grid.values), rh_grid.values)
    return Grid(t_grid.header, fahrenheit_to_celsius(hi_f), "degC")


def month_number(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        m = int(tag)
    else:
        key = str(tag).strip().lower()
        m = _MONTH_NAMES.get(key) or (int(key) if key.isdigit() else 0)
    if m not in MAM_MONTHS:
        raise DomainError(f"month tag {tag!r} is not one of Mar/Apr/May")
    return m


@dataclass(frozen=True)
class TaggedField:
    grid: Grid
    month: int
    timestamp: str = ""


def seasonal_mam_aggregate(fields: Sequence[TaggedField] | Iterable, mode: str = "mean") -> Grid:
    """Combine time-tagged HI grids into one MAM grid.

    ``mean``: per-pixel monthly means over available records, then the mean of
    the available monthly means. ``max``: per-pixel seasonal maximum. No gap
    filling; a pixel with no valid record is NaN.
    """
    fields = [f if isinstance(f, TaggedField) else TaggedField(*f) for f in fields]
    fields = [TaggedField(f.grid, month_number(f.month), f.timestamp) for f in fields]
    if not fields:
        raise ValueError("no input fields to aggregate")
    header = fields[0].grid.header
    if any(f.grid.header != header for f in fields):
        raise GridError("seasonal inputs are not aligned")
    ordered = sorted(fields, key=lambda f: (f.timestamp, f.month))
    stack = np.stack([f.grid.values for f in ordered])
    months = np.array([f.month for f in ordered])

    # all-NaN slices are the expected nodata case
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        if mode == "max":
            out = np.nanmax(stack, axis=0)
        elif mode == "mean":
            monthly = [np.nanmean(stack[months == m], axis=0) for m in MAM_MONTHS if np.any(months == m)]
            out = np.nanmean(np.stack(monthly), axis=0)
        else:
            raise ValueError(f"unknown aggregation mode {mode!r}")
    return Grid(header, out, fields[0].grid.units or "degC")
