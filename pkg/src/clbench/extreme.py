"""Extreme-event evaluation masks from localized rolling means.

For every pixel a trailing 7-day mean is blended with its neighbours
(0.44 centre, 0.11 per edge neighbour, 0.027 per corner neighbour, longitude
wrapping on global grids).  Per-pixel 5th/95th percentiles of that series
over the training years give the thresholds; a test pixel is extreme when
its localized mean falls strictly outside them.

The printed weights sum to 0.988, not 1, and are used as-is by default;
``renormalize=True`` divides by the weights actually applied.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from clbench import kernels
from clbench.errors import ConfigurationError, InsufficientHistoryError, UndefinedMetricError
from clbench.grid import Grid
from clbench.metrics import deterministic
from clbench.store import FieldSeries, Variable, concat_time

CENTER_WEIGHT = 0.44
EDGE_WEIGHT = 0.11
VERTEX_WEIGHT = 0.027
MASK_VARIABLE = "extreme_mask"


def window_samples(window_days: float, step_seconds: int) -> int:
    n = window_days * 86400.0 / step_seconds
    if step_seconds <= 0 or abs(n - round(n)) > 1e-9:
        raise ConfigurationError(f"{window_days}-day window is not a whole number of {step_seconds}s steps")
    return int(round(n))


def localized_mean_array(
    data: np.ndarray,
    window: int,
    periodic: bool = True,
    renormalize: bool = False,
    weights: tuple[float, float, float] = (CENTER_WEIGHT, EDGE_WEIGHT, VERTEX_WEIGHT),
) -> np.ndarray:
    """Localized means for a T x H x W array; output has T - window + 1 rows."""
    if data.shape[0] < window:
        raise InsufficientHistoryError(f"{data.shape[0]} samples cannot fill a {window}-sample window")
    means = kernels.trailing_mean(data, window)
    return kernels.stencil_blend(means, weights[0], weights[1], weights[2], periodic, renormalize)


def localized_rolling_mean(
    series: FieldSeries,
    variable: str | None = None,
    window_days: float = 7,
    renormalize: bool = False,
) -> FieldSeries:
    """Localized mean series for one variable.

    Timestamps are those with a full trailing window, i.e. the first output
    is the series' ``window``-th sample.
    """
    var = variable if variable is not None else series.names[0]
    window = window_samples(window_days, series.time_step_seconds)
    out = localized_mean_array(
        series.data[:, series.index(var)], window, series.grid.periodic_lon, renormalize
    )
    return FieldSeries(
        grid=series.grid,
        variables=[Variable(f"{var}_localized_mean", series.variables[series.index(var)].units)],
        times=series.times[window - 1 :],
        data=out[:, None].astype(np.float32),
        time_step_seconds=series.time_step_seconds,
        validate_static=False,
    )


@dataclass(frozen=True, eq=False)
class ThresholdField:
    lo: np.ndarray
    hi: np.ndarray
    grid: Grid
    percentiles: tuple[float, float] = (5.0, 95.0)
    variable: str = "t2m"

    def to_series(self) -> FieldSeries:
        return FieldSeries(
            grid=self.grid,
            variables=[Variable("lo"), Variable("hi")],
            times=[0],
            data=np.stack([self.lo, self.hi])[None].astype(np.float32),
            attrs={"kind": "extreme_thresholds", "percentiles": list(self.percentiles), "variable": self.variable},
            time_step_seconds=86400,
        )

    @classmethod
    def from_series(cls, s: FieldSeries) -> "ThresholdField":
        return cls(
            lo=s.data[0, s.index("lo")].astype(np.float64),
            hi=s.data[0, s.index("hi")].astype(np.float64),
            grid=s.grid,
            percentiles=tuple(s.attrs.get("percentiles", (5.0, 95.0))),
            variable=s.attrs.get("variable", "t2m"),
        )


@dataclass(frozen=True, eq=False)
class ExtremeMaskSeries:
    times: np.ndarray
    masks: np.ndarray
    grid: Grid
    time_step_seconds: int = 3600

    def fraction(self) -> float:
        return float(np.mean(self.masks))

    def select(self, times) -> np.ndarray:
        """Mask rows for ``times``; every requested time must be present."""
        times = np.asarray(times, dtype=np.int64)
        pos = np.searchsorted(self.times, times)
        ok = (pos < self.times.size) & (self.times[np.minimum(pos, self.times.size - 1)] == times)
        if not ok.all():
            raise ConfigurationError(f"{int((~ok).sum())} prediction times have no extreme mask")
        return self.masks[pos]

    def to_series(self) -> FieldSeries:
        return FieldSeries(
            grid=self.grid,
            variables=[Variable(MASK_VARIABLE)],
            times=self.times,
            data=self.masks[:, None].astype(np.float32),
            attrs={"kind": "extreme_masks"},
            time_step_seconds=self.time_step_seconds,
            validate_static=False,
        )

    @classmethod
    def from_series(cls, s: FieldSeries) -> "ExtremeMaskSeries":
        return cls(
            times=s.times.copy(),
            masks=s.data[:, s.index(MASK_VARIABLE)] > 0.5,
            grid=s.grid,
            time_step_seconds=s.time_step_seconds,
        )


def compute_thresholds(
    train_series: FieldSeries,
    variable: str | None = None,
    window_days: float = 7,
    percentiles: tuple[float, float] = (5.0, 95.0),
    min_samples: int = 100,
    renormalize: bool = False,
) -> ThresholdField:
    """Per-pixel percentiles (linear interpolation between order statistics)."""
    var = variable if variable is not None else train_series.names[0]
    lm = localized_rolling_mean(train_series, var, window_days, renormalize).data[:, 0].astype(np.float64)
    counts = np.isfinite(lm).sum(axis=0)
    if counts.min() < min_samples:
        raise InsufficientHistoryError(
            f"only {int(counts.min())} localized-mean samples at some pixel; need {min_samples}"
        )
    pct = np.nanpercentile if np.isnan(lm).any() else np.percentile
    lo, hi = pct(lm, list(percentiles), axis=0, method="linear")
    return ThresholdField(lo=lo, hi=hi, grid=train_series.grid, percentiles=tuple(percentiles), variable=var)


def build_masks(
    test_series: FieldSeries,
    thresholds: ThresholdField,
    variable: str | None = None,
    context: FieldSeries | None = None,
    window_days: float = 7,
    strict: bool = True,
    renormalize: bool = False,
) -> ExtremeMaskSeries:
    """Boolean masks over the test timestamps.

    ``context`` (the split just before the test years) feeds the trailing
    window of the first test timestamps; without it those timestamps are
    skipped.  ``strict`` treats values equal to a threshold as not extreme.
    """
    var = variable if variable is not None else thresholds.variable
    if var not in test_series.names:
        var = test_series.names[0]
    full = test_series
    if context is not None:
        full = concat_time(context.select([var]), test_series.select([var]))
    lm_series = localized_rolling_mean(full, var, window_days, renormalize)
    keep = lm_series.times >= test_series.times[0]
    lm = lm_series.data[keep, 0].astype(np.float64)
    if strict:
        masks = (lm < thresholds.lo) | (lm > thresholds.hi)
    else:
        masks = (lm <= thresholds.lo) | (lm >= thresholds.hi)
    return ExtremeMaskSeries(
        times=lm_series.times[keep],
        masks=masks,
        grid=test_series.grid,
        time_step_seconds=test_series.time_step_seconds,
    )


def masked_metric(metric: str, pred, truth, masks, weights, times=None, clim=None) -> float:
    """A deterministic metric restricted to the extreme pixels of each timestep.

    ``masks`` is an :class:`ExtremeMaskSeries` (rows picked by ``times``) or
    a boolean N x H x W array already aligned with ``pred``.
    """
    if isinstance(masks, ExtremeMaskSeries):
        m = masks.masks if times is None else masks.select(times)
    else:
        m = np.asarray(masks, dtype=bool)
    if not m.any():
        raise UndefinedMetricError("no extreme pixel in the evaluation period")
    return deterministic(metric, pred, truth, weights, mask=m, clim=clim)
