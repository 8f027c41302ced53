"""Lat-lon grid geometry and latitude weighting."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from clbench.errors import EmptyRegionError, InvalidCoordinateError, InvalidResolutionError

_LON_TOL = 1e-9


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Grid:
    """Regular latitude-longitude grid of cell centers (degrees)."""

    lats: np.ndarray
    lons: np.ndarray
    periodic_lon: bool = False

    def __post_init__(self):
        lats = _frozen(self.lats)
        lons = _frozen(self.lons)
        object.__setattr__(self, "lats", lats)
        object.__setattr__(self, "lons", lons)
        if lats.size < 1 or lons.size < 1:
            raise InvalidCoordinateError("grid needs at least one latitude and one longitude")
        if not np.all(np.isfinite(lats)) or not np.all(np.isfinite(lons)):
            raise InvalidCoordinateError("grid coordinates must be finite")
        if np.any(np.abs(lats) > 90.0):
            raise InvalidCoordinateError(f"latitudes outside [-90, 90]: {lats[np.abs(lats) > 90]}")
        if lats.size > 1:
            d = np.diff(lats)
            if not (np.all(d > 0) or np.all(d < 0)):
                raise InvalidCoordinateError("latitudes must be strictly monotonic")
        if lons.size > 1:
            d = np.diff(lons)
            if not np.all(d > 0):
                raise InvalidCoordinateError("longitudes must be strictly increasing")
            if self.periodic_lon and np.ptp(d) > _LON_TOL:
                raise InvalidCoordinateError("periodic grids need uniform longitude spacing")
        if np.any(lons < -180.0) or np.any(lons >= 360.0):
            raise InvalidCoordinateError("longitudes must lie in [-180, 360)")

    @property
    def H(self) -> int:
        return int(self.lats.size)

    @property
    def W(self) -> int:
        return int(self.lons.size)

    @property
    def shape(self) -> tuple[int, int]:
        return self.H, self.W

    @property
    def dlon(self) -> float:
        if self.W > 1:
            return float(self.lons[1] - self.lons[0])
        return 360.0

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.periodic_lon == other.periodic_lon
            and np.array_equal(self.lats, other.lats)
            and np.array_equal(self.lons, other.lons)
        )

    def __hash__(self):
        return hash((self.lats.tobytes(), self.lons.tobytes(), self.periodic_lon))

    def subgrid(self, rows, cols) -> "Grid":
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        lons = self.lons[cols]
        if lons.size > 1 and np.any(np.diff(lons) <= 0):
            # Seam crossing: continue eastward from the first column.
            lons = lons[0] + np.mod(lons - lons[0], 360.0)
            if lons.max() >= 360.0:
                lons = lons - 360.0
        full = cols.size == self.W and self.periodic_lon
        return Grid(self.lats[rows], lons, periodic_lon=full)


@dataclass(frozen=True, eq=False)
class LatWeights:
    """Per-row latitude weights with unit mean."""

    w: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "w", _frozen(self.w))

    def __len__(self):
        return self.w.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.w, dtype=dtype)


@dataclass(frozen=True)
class RegionBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not self.lat_min < self.lat_max:
            raise EmptyRegionError(f"lat_min ({self.lat_min}) must be < lat_max ({self.lat_max})")


GLOBAL = RegionBox(-90.0, 90.0, 0.0, 360.0)
# Conterminous US; on the 2.8125 degree global grid this selects 9 x 21 cells.
CONUS = RegionBox(24.0, 50.0, 235.0, 294.0)


def make_lat_weights(grid: Grid | np.ndarray) -> LatWeights:
    """Latitude weights ``cos(lat_i) / mean_j cos(lat_j)``.

    Accepts a :class:`Grid` or a bare array of latitudes in degrees.
    """
    lats = grid.lats if isinstance(grid, Grid) else np.asarray(grid, dtype=np.float64).reshape(-1)
    if np.any(np.abs(lats) > 90.0):
        raise InvalidCoordinateError(f"latitudes outside [-90, 90]: {lats[np.abs(lats) > 90]}")
    c = np.cos(np.deg2rad(lats))
    # Correctly rounded sum: the mean, hence w, is independent of row order.
    return LatWeights(c / (math.fsum(c) / c.size))


def grid_from_resolution(deg: float) -> Grid:
    """Global cell-centered grid at ``deg`` spacing (WeatherBench layout).

    Latitudes ascend from ``-90 + deg/2``; longitudes start at 0.
    """
    deg = float(deg)
    if not deg > 0:
        raise InvalidResolutionError(f"resolution must be positive, got {deg}")
    nh = 180.0 / deg
    nw = 360.0 / deg
    if abs(nh - round(nh)) > 1e-9 or abs(nw - round(nw)) > 1e-9:
        raise InvalidResolutionError(f"{deg} degrees does not divide 180 and 360 evenly")
    H, W = int(round(nh)), int(round(nw))
    lats = -90.0 + (np.arange(H) + 0.5) * deg
    lons = np.arange(W) * deg
    return Grid(lats, lons, periodic_lon=True)


def lon_distance(a, b, periodic: bool) -> np.ndarray:
    """Absolute longitude separation in degrees, wrapped when ``periodic``."""
    d = np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))
    if periodic:
        d = np.mod(d, 360.0)
        d = np.minimum(d, 360.0 - d)
    return d


def subgrid_indices(grid: Grid, box: RegionBox) -> tuple[np.ndarray, np.ndarray]:
    """Row and column indices whose cell centers fall inside ``box``.

    On periodic grids a box with ``lon_min > lon_max`` (after reduction
    modulo 360) straddles the seam; its columns are returned eastward from
    ``lon_min``, i.e. two index ranges concatenated.
    """
    eps = 1e-9
    rows = np.flatnonzero((grid.lats >= box.lat_min - eps) & (grid.lats <= box.lat_max + eps))
    if grid.periodic_lon:
        width = box.lon_max - box.lon_min
        if width < 0:
            width += 360.0
        if width >= 360.0 - eps:
            cols = np.arange(grid.W)
        else:
            offset = np.mod(grid.lons - box.lon_min, 360.0)
            offset = np.where(offset > 360.0 - eps, 0.0, offset)
            inside = offset <= width + eps
            cols = np.flatnonzero(inside)
            cols = cols[np.argsort(offset[cols], kind="stable")]
    else:
        cols = np.flatnonzero((grid.lons >= box.lon_min - eps) & (grid.lons <= box.lon_max + eps))
    if rows.size == 0 or cols.size == 0:
        raise EmptyRegionError(f"{box} selects no cells of a {grid.H}x{grid.W} grid")
    return rows, cols
