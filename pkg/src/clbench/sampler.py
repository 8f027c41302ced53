"""Task sample construction: forecasting windows, lead-time conditioning,
downscaling pairs and projection stacks.

Input channel names encode their provenance: ``t2m@-6h`` is 2 m temperature
six hours before the anchor time, ``lsm`` a static field, ``lead_time`` the
lead-conditioning channel and ``co2@y-9`` a forcing nine years back.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from clbench.errors import (
    ChannelMismatchError,
    ConfigurationError,
    EmptySampleSetError,
    InsufficientHistoryError,
)
from clbench.grid import Grid
from clbench.regrid import pad_to
from clbench.store import FieldSeries, Variable, concat_time

LEAD_CHANNEL = "lead_time"
LEAD_SCALE = 100.0


@dataclass(frozen=True)
class LeadTime:
    hours: int

    def __post_init__(self):
        if int(self.hours) != self.hours or self.hours <= 0:
            raise ConfigurationError(f"lead time must be a positive whole number of hours, got {self.hours}")

    def steps(self, step_hours: float) -> int:
        n = self.hours / step_hours
        if abs(n - round(n)) > 1e-9:
            raise ConfigurationError(f"lead {self.hours}h is not a multiple of the {step_hours}h base step")
        return int(round(n))


def _lead(lead) -> LeadTime:
    return lead if isinstance(lead, LeadTime) else LeadTime(int(lead))


def channel_name(var: str, offset_hours: float) -> str:
    return f"{var}@{int(offset_hours)}h"


def parse_channel(name: str) -> tuple[str, int | None]:
    """Split ``var@-6h`` into ``("var", -6)``; static names give ``(name, None)``."""
    if "@" in name and name.endswith("h"):
        var, off = name.rsplit("@", 1)
        try:
            return var, int(off[:-1])
        except ValueError:
            pass
    return name, None


@dataclass(eq=False)
class SampleSet:
    """Paired inputs (N x C_in x H x W) and targets (N x C_out x H' x W')."""

    inputs: np.ndarray
    targets: np.ndarray
    leads: np.ndarray
    input_names: list[str]
    target_names: list[str]
    times: np.ndarray
    input_grid: Grid | None = None
    target_grid: Grid | None = None
    target_mask: np.ndarray | None = None
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.leads = np.asarray(self.leads, dtype=np.int64).reshape(-1)
        self.times = np.asarray(self.times, dtype=np.int64).reshape(-1)
        N = self.inputs.shape[0]
        if not (self.targets.shape[0] == N == self.leads.size == self.times.size):
            raise ConfigurationError("sample count differs between inputs, targets, leads and times")
        if self.inputs.shape[1] != len(self.input_names) or self.targets.shape[1] != len(self.target_names):
            raise ConfigurationError("channel count does not match channel names")
        for names in (self.input_names, self.target_names):
            if len(set(names)) != len(names):
                raise ConfigurationError(f"duplicate channel names: {names}")

    def __len__(self):
        return int(self.inputs.shape[0])

    @property
    def valid_times(self) -> np.ndarray:
        return self.times + self.leads * 3600

    def to_series(self, kind: str = "inputs", attrs: dict | None = None) -> FieldSeries:
        """Export inputs or targets as a FieldSeries indexed by anchor time."""
        data = self.inputs if kind == "inputs" else self.targets
        names = self.input_names if kind == "inputs" else self.target_names
        grid = self.input_grid if kind == "inputs" else self.target_grid
        if grid is None:
            raise ConfigurationError("sample set carries no grid for export")
        step = int(self.times[1] - self.times[0]) if len(self) > 1 else 3600
        return FieldSeries(
            grid=grid,
            variables=[Variable(n) for n in names],
            times=self.times,
            data=data,
            attrs=dict(attrs or {}),
            time_step_seconds=step,
            validate_static=False,
        )


def _validate_offsets(offsets: Sequence[float], step_hours: float) -> np.ndarray:
    offs = [float(o) for o in offsets]
    if not offs or offs[0] != 0:
        raise ConfigurationError(f"history offsets must start at 0, got {offs}")
    if any(b >= a for a, b in zip(offs, offs[1:])):
        raise ConfigurationError(f"history offsets must be strictly descending, got {offs}")
    steps = []
    for o in offs:
        n = o / step_hours
        if abs(n - round(n)) > 1e-9:
            raise ConfigurationError(f"offset {o}h is not a multiple of the {step_hours}h step")
        steps.append(int(round(n)))
    return np.asarray(steps, dtype=np.int64)


def _resolve_vars(series: FieldSeries, in_vars, out_vars):
    in_vars = list(series.names if in_vars is None else in_vars)
    for v in in_vars:
        series.index(v)
    if out_vars is None:
        out_vars = [v for v in in_vars if not series.variables[series.index(v)].static]
    out_vars = list(out_vars)
    missing = [v for v in out_vars if v not in series.names]
    if missing:
        raise ChannelMismatchError(f"output variables {missing} are not in the series")
    return in_vars, out_vars


def input_channel_names(series: FieldSeries, in_vars: Sequence[str], offsets_hours: Sequence[float]) -> list[str]:
    """Non-static variables times offsets (variable-major), then statics."""
    dynamic = [v for v in in_vars if not series.variables[series.index(v)].static]
    static = [v for v in in_vars if series.variables[series.index(v)].static]
    return [channel_name(v, o) for v in dynamic for o in offsets_hours] + static


def _gather_inputs(full: FieldSeries, anchors: np.ndarray, in_vars, off_steps: np.ndarray) -> np.ndarray:
    blocks = []
    dynamic = [v for v in in_vars if not full.variables[full.index(v)].static]
    static = [v for v in in_vars if full.variables[full.index(v)].static]
    idx = anchors[:, None] + off_steps[None, :]
    for v in dynamic:
        blocks.append(full.data[idx, full.index(v)])
    for v in static:
        blocks.append(full.data[anchors, full.index(v)][:, None])
    return np.concatenate(blocks, axis=1) if blocks else np.empty((anchors.size, 0) + full.grid.shape, np.float32)


def _window(series: FieldSeries, context: FieldSeries | None, off_steps, max_lead_steps: int):
    full = concat_time(context, series) if context is not None else series
    start = full.T - series.T
    lo = max(start, int(-off_steps.min()))
    hi = full.T - max_lead_steps
    anchors = np.arange(lo, hi, dtype=np.int64)
    return full, anchors


def forecasting_samples(
    series: FieldSeries,
    history_offsets_hours: Sequence[float] = (0,),
    lead=6,
    in_vars: Sequence[str] | None = None,
    out_vars: Sequence[str] | None = None,
    context: FieldSeries | None = None,
) -> SampleSet:
    """Fixed-lead forecasting pairs.

    Anchors whose history window or target falls outside ``series`` are
    dropped.  ``context`` (the immediately preceding split) may supply
    history for the first anchors; targets always stay inside ``series``.
    """
    lead = _lead(lead)
    step_h = series.step_hours
    off_steps = _validate_offsets(history_offsets_hours, step_h)
    lead_steps = lead.steps(step_h)
    in_vars, out_vars = _resolve_vars(series, in_vars, out_vars)
    full, anchors = _window(series, context, off_steps, lead_steps)
    if anchors.size == 0:
        raise EmptySampleSetError(
            f"no complete windows: {series.T} steps, offsets {list(history_offsets_hours)}, lead {lead.hours}h"
        )
    out_idx = [full.index(v) for v in out_vars]
    return SampleSet(
        inputs=_gather_inputs(full, anchors, in_vars, off_steps),
        targets=full.data[anchors + lead_steps][:, out_idx],
        leads=np.full(anchors.size, lead.hours),
        input_names=input_channel_names(series, in_vars, history_offsets_hours),
        target_names=list(out_vars),
        times=full.times[anchors],
        input_grid=series.grid,
        target_grid=series.grid,
        attrs={"task": "forecasting", "offsets_hours": [int(o) for o in history_offsets_hours]},
    )


def lead_choices(lo: float, hi: float, step_hours: float) -> np.ndarray:
    """Multiples of the base step within ``[lo, hi]`` hours."""
    if lo < step_hours or hi < lo:
        raise ConfigurationError(f"empty lead range [{lo}, {hi}] for a {step_hours}h step")
    first = int(np.ceil(lo / step_hours - 1e-9))
    last = int(np.floor(hi / step_hours + 1e-9))
    if last < first:
        raise ConfigurationError(f"lead range [{lo}, {hi}] contains no multiple of {step_hours}h")
    return np.arange(first, last + 1, dtype=np.int64) * step_hours


def draw_leads(n: int, lo: float, hi: float, step_hours: float, rng: np.random.Generator) -> np.ndarray:
    choices = lead_choices(lo, hi, step_hours)
    return choices[rng.integers(0, choices.size, size=n)]


def continuous_samples(
    series: FieldSeries,
    lead_range_hours: tuple[float, float] = (6, 120),
    rng_seed: int = 0,
    history_offsets_hours: Sequence[float] = (0,),
    in_vars: Sequence[str] | None = None,
    out_vars: Sequence[str] | None = None,
    fixed_lead_hours: float | None = None,
    context: FieldSeries | None = None,
) -> SampleSet:
    """Lead-conditioned samples with a trailing ``lead_time`` channel (hours / 100).

    Training mode (``fixed_lead_hours=None``) draws each sample's lead
    uniformly from step multiples in ``lead_range_hours``; every anchor must
    admit the longest lead.  Evaluation mode uses the fixed lead.
    """
    step_h = series.step_hours
    lo, hi = lead_range_hours
    choices = lead_choices(lo, hi, step_h)
    off_steps = _validate_offsets(history_offsets_hours, step_h)
    in_vars, out_vars = _resolve_vars(series, in_vars, out_vars)
    max_lead = fixed_lead_hours if fixed_lead_hours is not None else choices.max()
    max_steps = _lead(max_lead).steps(step_h)
    full, anchors = _window(series, context, off_steps, max_steps)
    if anchors.size == 0:
        raise EmptySampleSetError("no anchors admit the requested lead range")
    if fixed_lead_hours is not None:
        leads = np.full(anchors.size, _lead(fixed_lead_hours).hours, dtype=np.int64)
    else:
        leads = draw_leads(anchors.size, lo, hi, step_h, np.random.default_rng(rng_seed)).astype(np.int64)
    lead_steps = np.rint(leads / step_h).astype(np.int64)
    out_idx = [full.index(v) for v in out_vars]
    inputs = _gather_inputs(full, anchors, in_vars, off_steps)
    lead_ch = np.broadcast_to((leads / LEAD_SCALE).astype(np.float32)[:, None, None, None], (anchors.size, 1) + series.grid.shape)
    return SampleSet(
        inputs=np.concatenate([inputs, lead_ch], axis=1),
        targets=full.data[anchors + lead_steps][:, out_idx],
        leads=leads,
        input_names=input_channel_names(series, in_vars, history_offsets_hours) + [LEAD_CHANNEL],
        target_names=list(out_vars),
        times=full.times[anchors],
        input_grid=series.grid,
        target_grid=series.grid,
        attrs={
            "task": "forecasting",
            "protocol": "continuous",
            "lead_range_hours": [float(lo), float(hi)],
            "offsets_hours": [int(o) for o in history_offsets_hours],
        },
    )


def downscaling_pairs(
    low: FieldSeries,
    high: FieldSeries,
    in_vars: Sequence[str] | None = None,
    out_vars: Sequence[str] | None = None,
    pad: tuple[int, int] | None = None,
    anchor: tuple[int, int] = (0, 0),
    fill: float = 0.0,
) -> SampleSet:
    """Pair coarse and fine fields at shared timestamps.

    With ``pad`` the fine targets are placed at ``anchor`` in a zero-filled
    canvas and ``target_mask`` marks the real cells.
    """
    in_vars = list(low.names if in_vars is None else in_vars)
    out_vars = list(high.names if out_vars is None else out_vars)
    common, il, ih = np.intersect1d(low.times, high.times, assume_unique=True, return_indices=True)
    if common.size == 0:
        raise EmptySampleSetError("low- and high-resolution series share no timestamps")
    inputs = low.data[il][:, [low.index(v) for v in in_vars]]
    targets = high.data[ih][:, [high.index(v) for v in out_vars]]
    mask = None
    target_grid = high.grid
    if pad is not None:
        targets, mask = pad_to(targets, pad[0], pad[1], fill=fill, anchor=anchor)
        target_grid = None
    return SampleSet(
        inputs=inputs,
        targets=targets,
        leads=np.zeros(common.size, dtype=np.int64),
        input_names=in_vars,
        target_names=out_vars,
        times=common,
        input_grid=low.grid,
        target_grid=target_grid,
        target_mask=mask,
        attrs={"task": "downscaling", "pad": list(pad) if pad else None, "anchor": list(anchor)},
    )


def projection_samples(
    forcings: FieldSeries,
    targets: FieldSeries,
    window_years: int = 10,
    forcing_vars: Sequence[str] | None = None,
    target_vars: Sequence[str] | None = None,
) -> SampleSet:
    """Stack ``window_years`` consecutive annual forcing fields per target year.

    Channels run oldest year first, forcings varying fastest within a year.
    """
    forcing_vars = list(forcings.names if forcing_vars is None else forcing_vars)
    target_vars = list(targets.names if target_vars is None else target_vars)
    common, i_f, i_t = np.intersect1d(forcings.times, targets.times, assume_unique=True, return_indices=True)
    T = common.size
    if T < window_years:
        raise InsufficientHistoryError(f"{T} aligned years but a {window_years}-year window is required")
    fdata = forcings.data[i_f][:, [forcings.index(v) for v in forcing_vars]]
    tdata = targets.data[i_t][:, [targets.index(v) for v in target_vars]]
    n = T - window_years + 1
    idx = np.arange(n)[:, None] + np.arange(window_years)[None, :]
    stacked = fdata[idx].reshape((n, window_years * len(forcing_vars)) + forcings.grid.shape)
    names = [f"{v}@y-{window_years - 1 - y}" for y in range(window_years) for v in forcing_vars]
    return SampleSet(
        inputs=stacked,
        targets=tdata[window_years - 1 :],
        leads=np.zeros(n, dtype=np.int64),
        input_names=names,
        target_names=target_vars,
        times=common[window_years - 1 :],
        input_grid=forcings.grid,
        target_grid=targets.grid,
        attrs={"task": "projection", "window_years": window_years},
    )
