"""FieldSeries, the CLBT container format, normalization and year splits.

Container layout ("CLBT v1", little-endian)::

    b"CLBT" | u16 version=1 | u32 header_len | UTF-8 JSON header
    | T*C*H*W float32 payload (row-major) | u32 CRC32(payload)
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from clbench.errors import (
    BadMagicError,
    ChannelMismatchError,
    ChecksumError,
    ConfigurationError,
    DegenerateChannelError,
    DimensionMismatchError,
    EmptySplitError,
    HeaderParseError,
    InvariantError,
    OverlappingSplitError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from clbench.grid import Grid

MAGIC = b"CLBT"
VERSION = 1
_RESERVED = (
    "dims",
    "vars",
    "lats",
    "lons",
    "periodic_lon",
    "time_start_unix",
    "time_step_seconds",
    "dtype",
)


@dataclass(frozen=True)
class Variable:
    name: str
    units: str = ""
    level: str | int = "surface"
    static: bool = False

    def to_json(self) -> dict:
        return {"name": self.name, "units": self.units, "level": self.level, "static": self.static}

    @classmethod
    def from_json(cls, d: dict) -> "Variable":
        return cls(str(d["name"]), str(d.get("units", "")), d.get("level", "surface"), bool(d.get("static", False)))


def _as_variables(variables) -> tuple[Variable, ...]:
    out = []
    for v in variables:
        if isinstance(v, Variable):
            out.append(v)
        elif isinstance(v, str):
            out.append(Variable(v))
        else:
            out.append(Variable.from_json(v))
    return tuple(out)


@dataclass(frozen=True, eq=False)
class FieldSeries:
    """Time-indexed stack of gridded variables, ``data`` shaped T x C x H x W.

    ``times`` are UTC seconds with a constant step.  ``attrs`` carries extra
    header keys (prediction metadata and the like) through the container.
    """

    grid: Grid
    variables: tuple[Variable, ...]
    times: np.ndarray
    data: np.ndarray
    attrs: dict = field(default_factory=dict)
    time_step_seconds: int | None = None
    validate_static: bool = True

    def __post_init__(self):
        variables = _as_variables(self.variables)
        object.__setattr__(self, "variables", variables)
        times = np.asarray(self.times, dtype=np.int64).reshape(-1)
        data = np.asarray(self.data, dtype=np.float32)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "data", data)
        if not variables:
            raise InvariantError("a FieldSeries needs at least one variable")
        names = [v.name for v in variables]
        if len(set(names)) != len(names):
            raise InvariantError(f"duplicate variable names: {names}")
        expect = (times.size, len(variables), self.grid.H, self.grid.W)
        if data.shape != expect:
            raise DimensionMismatchError(f"data shape {data.shape} != expected {expect}")
        if times.size > 1:
            d = np.diff(times)
            if np.any(d <= 0) or np.any(d != d[0]):
                raise InvariantError("times must be strictly increasing with a constant step")
            step = int(d[0])
            if self.time_step_seconds is not None and int(self.time_step_seconds) != step:
                raise InvariantError(f"time_step_seconds={self.time_step_seconds} disagrees with times (step {step})")
        else:
            step = int(self.time_step_seconds) if self.time_step_seconds is not None else 0
        object.__setattr__(self, "time_step_seconds", step)
        if self.validate_static and times.size > 1:
            for c, v in enumerate(variables):
                if v.static and not np.array_equal(data[:, c], np.broadcast_to(data[:1, c], data[:, c].shape), equal_nan=True):
                    raise InvariantError(f"static variable {v.name!r} varies over time")

    @property
    def T(self) -> int:
        return int(self.data.shape[0])

    @property
    def C(self) -> int:
        return int(self.data.shape[1])

    @property
    def names(self) -> list[str]:
        return [v.name for v in self.variables]

    @property
    def static_mask(self) -> np.ndarray:
        return np.array([v.static for v in self.variables], dtype=bool)

    @property
    def step_hours(self) -> float:
        return self.time_step_seconds / 3600.0

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ChannelMismatchError(f"variable {name!r} not in series {self.names}") from None

    def years(self) -> np.ndarray:
        return self.times.astype("datetime64[s]").astype("datetime64[Y]").astype(np.int64) + 1970

    def replace(self, **kw) -> "FieldSeries":
        base = dict(
            grid=self.grid,
            variables=self.variables,
            times=self.times,
            data=self.data,
            attrs=dict(self.attrs),
            time_step_seconds=self.time_step_seconds,
            validate_static=False,
        )
        base.update(kw)
        return FieldSeries(**base)

    def select(self, names: Sequence[str]) -> "FieldSeries":
        idx = [self.index(n) for n in names]
        return self.replace(variables=[self.variables[i] for i in idx], data=self.data[:, idx])

    def isel(self, index) -> "FieldSeries":
        """Subset along time by slice or contiguous index array."""
        return self.replace(times=self.times[index], data=self.data[index])

    def subsample(self, stride: int) -> "FieldSeries":
        if stride < 1:
            raise ConfigurationError("stride must be >= 1")
        return self.replace(
            times=self.times[::stride],
            data=self.data[::stride],
            time_step_seconds=self.time_step_seconds * stride,
        )


def concat_time(first: FieldSeries, second: FieldSeries) -> FieldSeries:
    """Join two consecutive series (same grid and variables) along time."""
    if first.grid != second.grid or first.names != second.names:
        raise ChannelMismatchError("series differ in grid or variables")
    if first.T == 0:
        return second
    if second.T == 0:
        return first
    step = first.time_step_seconds or second.time_step_seconds
    if second.times[0] - first.times[-1] != step:
        raise InvariantError("series are not consecutive in time")
    return first.replace(
        times=np.concatenate([first.times, second.times]),
        data=np.concatenate([first.data, second.data]),
    )


# ---------------------------------------------------------------------------
# container I/O


def _header(series: FieldSeries) -> dict:
    h = {
        "dims": [series.T, series.C, series.grid.H, series.grid.W],
        "vars": [v.to_json() for v in series.variables],
        "lats": [float(x) for x in series.grid.lats],
        "lons": [float(x) for x in series.grid.lons],
        "periodic_lon": bool(series.grid.periodic_lon),
        "time_start_unix": int(series.times[0]) if series.T else 0,
        "time_step_seconds": int(series.time_step_seconds),
        "dtype": "f32",
    }
    for k, v in series.attrs.items():
        if k in _RESERVED:
            raise InvariantError(f"attribute {k!r} collides with a reserved header key")
        h[k] = v
    return h


def write_container(series: FieldSeries, path) -> None:
    """Write ``series`` to ``path`` in CLBT v1 layout.

    Output is a pure function of the series, so repeated writes are
    byte-identical.
    """
    if not series.variables:
        raise InvariantError("refusing to write a series without variables")
    header = json.dumps(_header(series), separators=(",", ":"), allow_nan=False).encode("utf-8")
    payload = np.ascontiguousarray(series.data, dtype="<f4")
    crc = zlib.crc32(memoryview(payload).cast("B"))
    tmp = f"{os.fspath(path)}.part"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(header)))
        f.write(header)
        f.write(memoryview(payload).cast("B"))
        f.write(struct.pack("<I", crc))
    os.replace(tmp, path)


def read_header(f) -> dict:
    magic = f.read(4)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    raw = f.read(6)
    if len(raw) < 6:
        raise HeaderParseError("file ends inside the fixed header")
    version, hlen = struct.unpack("<HI", raw)
    if version != VERSION:
        raise UnsupportedVersionError(f"container version {version} is not supported (expected {VERSION})")
    text = f.read(hlen)
    if len(text) != hlen:
        raise HeaderParseError(f"header length {hlen} exceeds the file size")
    try:
        header = json.loads(text.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderParseError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderParseError("header JSON must be an object")
    missing = [k for k in _RESERVED if k not in header]
    if missing:
        raise HeaderParseError(f"header missing keys {missing}")
    if header["dtype"] != "f32":
        raise HeaderParseError(f"unsupported dtype {header['dtype']!r}")
    return header


def read_container(path) -> FieldSeries:
    """Load a CLBT file; validates magic, version, dimensions and CRC32."""
    with open(path, "rb") as f:
        header = read_header(f)
        dims = header["dims"]
        if not (isinstance(dims, list) and len(dims) == 4 and all(isinstance(d, int) and d >= 0 for d in dims)):
            raise HeaderParseError(f"malformed dims {dims!r}")
        T, C, H, W = dims
        if C != len(header["vars"]) or H != len(header["lats"]) or W != len(header["lons"]):
            raise DimensionMismatchError(
                f"dims {dims} disagree with {len(header['vars'])} vars, "
                f"{len(header['lats'])} lats, {len(header['lons'])} lons"
            )
        n = T * C * H * W
        data = np.fromfile(f, dtype="<f4", count=n)
        if data.size != n:
            raise TruncatedPayloadError(f"payload has {data.size} of {n} values")
        tail = f.read(4)
        if len(tail) != 4:
            raise TruncatedPayloadError("missing payload checksum")
        (crc,) = struct.unpack("<I", tail)
    if zlib.crc32(memoryview(data).cast("B")) != crc:
        raise ChecksumError(f"{path}: payload CRC32 mismatch")
    step = int(header["time_step_seconds"])
    times = int(header["time_start_unix"]) + step * np.arange(T, dtype=np.int64)
    grid = Grid(header["lats"], header["lons"], periodic_lon=bool(header["periodic_lon"]))
    attrs = {k: v for k, v in header.items() if k not in _RESERVED}
    return FieldSeries(
        grid=grid,
        variables=[Variable.from_json(v) for v in header["vars"]],
        times=times,
        data=data.reshape(T, C, H, W).astype(np.float32, copy=False),
        attrs=attrs,
        time_step_seconds=step,
        validate_static=False,
    )


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    """Inclusive year ranges for train / validation / test."""

    train_years: tuple[int, int] = (1979, 2015)
    val_years: tuple[int, int] = (2016, 2016)
    test_years: tuple[int, int] = (2017, 2018)

    def __post_init__(self):
        ranges = [("train", self.train_years), ("val", self.val_years), ("test", self.test_years)]
        for name, (a, b) in ranges:
            if a > b:
                raise ConfigurationError(f"{name} years {a}-{b} are reversed")
        for i in range(3):
            for j in range(i + 1, 3):
                (n1, (a1, b1)), (n2, (a2, b2)) = ranges[i], ranges[j]
                if a1 <= b2 and a2 <= b1:
                    raise OverlappingSplitError(f"{n1} years {a1}-{b1} overlap {n2} years {a2}-{b2}")

    def ranges(self) -> dict[str, tuple[int, int]]:
        return {"train": self.train_years, "val": self.val_years, "test": self.test_years}


def split_by_years(series: FieldSeries, spec: SplitSpec) -> tuple[FieldSeries, FieldSeries, FieldSeries]:
    """Chronological (train, val, test) partition of ``series``."""
    years = series.years()
    out = []
    for name, (a, b) in spec.ranges().items():
        idx = np.flatnonzero((years >= a) & (years <= b))
        if idx.size == 0:
            raise EmptySplitError(f"{name} split ({a}-{b}) selects no timestamps")
        if idx[-1] - idx[0] + 1 != idx.size:
            raise EmptySplitError(f"{name} split ({a}-{b}) is not contiguous in time")
        out.append(series.isel(slice(int(idx[0]), int(idx[-1]) + 1)))
    return tuple(out)


# ---------------------------------------------------------------------------
# normalization


@dataclass(frozen=True, eq=False)
class NormStats:
    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> dict:
        return {
            "names": list(self.names),
            "mean": [float(x) for x in self.mean],
            "std": [float(x) for x in self.std],
        }

    @classmethod
    def from_json(cls, d: dict) -> "NormStats":
        return cls(tuple(d["names"]), np.asarray(d["mean"], float), np.asarray(d["std"], float))

    def lookup(self, names: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        pos = {n: i for i, n in enumerate(self.names)}
        missing = [n for n in names if n not in pos]
        if missing:
            raise ChannelMismatchError(f"no normalization statistics for {missing}")
        idx = [pos[n] for n in names]
        return self.mean[idx], self.std[idx]


def compute_norm_stats(series: FieldSeries, split: SplitSpec | None = None) -> NormStats:
    """Per-channel mean and (population) std over the training timestamps.

    Pixels are weighted equally; NaNs are ignored.  When ``split`` is None the
    whole series is treated as training data.
    """
    train = series
    if split is not None:
        years = series.years()
        a, b = split.train_years
        train = series.isel(np.flatnonzero((years >= a) & (years <= b)))
    if train.T == 0:
        raise EmptySplitError("training split is empty")
    mean = np.empty(train.C)
    std = np.empty(train.C)
    for c in range(train.C):
        x = train.data[:, c].astype(np.float64)
        mean[c] = np.nanmean(x)
        std[c] = np.sqrt(np.nanmean((x - mean[c]) ** 2))
        if not std[c] > 0:
            raise DegenerateChannelError(train.variables[c].name)
    return NormStats(tuple(train.names), mean, std)


def _affine(series: FieldSeries, stats: NormStats, inverse: bool) -> FieldSeries:
    mean, std = stats.lookup(series.names)
    m = mean[None, :, None, None]
    s = std[None, :, None, None]
    x = series.data.astype(np.float64)
    y = x * s + m if inverse else (x - m) / s
    return series.replace(data=y.astype(np.float32))


def normalize(series: FieldSeries, stats: NormStats) -> FieldSeries:
    return _affine(series, stats, inverse=False)


def denormalize(series: FieldSeries, stats: NormStats) -> FieldSeries:
    return _affine(series, stats, inverse=True)
