"""Evaluation runs: direct and continuous scoring, iterative rollout,
probabilistic scoring and report emission."""
from __future__ import annotations

import json
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from clbench import metrics
from clbench.errors import (
    AlignmentError,
    ConfigurationError,
    RolloutIncompatibleError,
    UndefinedMetricError,
)
from clbench.extreme import ExtremeMaskSeries
from clbench.grid import Grid, LatWeights, make_lat_weights
from clbench.metrics import ClimatologyMap, EnsembleForecast, GaussianForecast
from clbench.report import MetricRecord, MetricReport
from clbench.sampler import LEAD_CHANNEL, SampleSet, parse_channel
from clbench.store import FieldSeries, Variable, read_container, write_container

PREDICTION_KEYS = ("task", "protocol", "lead_hours", "model_tag", "split")


def default_threads() -> int:
    env = os.environ.get("CLBENCH_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# prediction sets


@dataclass(eq=False)
class PredictionSet:
    """Model output aligned with a SampleSet's targets (N x C_out x H' x W')."""

    data: np.ndarray
    names: list[str]
    times: np.ndarray
    leads: np.ndarray
    source: str = ""
    grid: Grid | None = None
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.times = np.asarray(self.times, dtype=np.int64).reshape(-1)
        self.leads = np.broadcast_to(np.asarray(self.leads, dtype=np.int64), self.times.shape).copy()
        if self.data.ndim != 4 or self.data.shape[0] != self.times.size or self.data.shape[1] != len(self.names):
            raise ConfigurationError(f"prediction data {self.data.shape} inconsistent with {self.times.size} times / {self.names}")

    @classmethod
    def for_samples(cls, data, samples: SampleSet, source: str = "") -> "PredictionSet":
        return cls(
            data=data,
            names=list(samples.target_names),
            times=samples.times,
            leads=samples.leads,
            source=source,
            grid=samples.target_grid,
        )


def check_alignment(preds: PredictionSet, truth: SampleSet) -> None:
    if preds.data.shape != truth.targets.shape:
        raise AlignmentError(f"prediction shape {preds.data.shape} != target shape {truth.targets.shape}")
    if list(preds.names) != list(truth.target_names):
        raise AlignmentError(f"prediction variables {preds.names} != targets {truth.target_names}")
    if not np.array_equal(preds.times, truth.times):
        raise AlignmentError("prediction times differ from sample times")
    if not np.array_equal(preds.leads, truth.leads):
        raise AlignmentError("prediction lead times differ from sample lead times")


def write_predictions(preds: PredictionSet, path, task="forecasting", protocol="direct", model_tag="", split="test"):
    """Store a single-lead prediction set as a CLBT container."""
    leads = np.unique(preds.leads)
    if leads.size != 1:
        raise ConfigurationError("a prediction container holds exactly one lead time")
    if preds.grid is None:
        raise ConfigurationError("prediction set needs a grid to be written")
    attrs = {
        "task": task,
        "protocol": protocol,
        "lead_hours": int(leads[0]),
        "model_tag": model_tag or preds.source,
        "split": split,
    }
    step = int(preds.times[1] - preds.times[0]) if preds.times.size > 1 else 3600
    series = FieldSeries(
        grid=preds.grid,
        variables=[Variable(n) for n in preds.names],
        times=preds.times,
        data=preds.data,
        attrs=attrs,
        time_step_seconds=step,
        validate_static=False,
    )
    write_container(series, path)


def read_predictions(path) -> PredictionSet:
    s = read_container(path)
    missing = [k for k in ("lead_hours",) if k not in s.attrs]
    if missing:
        raise AlignmentError(f"{path}: prediction header lacks {missing}")
    return PredictionSet(
        data=s.data,
        names=s.names,
        times=s.times,
        leads=int(s.attrs["lead_hours"]),
        source=s.attrs.get("model_tag", str(path)),
        grid=s.grid,
        attrs=dict(s.attrs),
    )


# ---------------------------------------------------------------------------
# configuration


@dataclass
class EvalConfig:
    """What to score and how.

    Attributes:
        metrics: deterministic metric names (see ``metrics.DETERMINISTIC_METRICS``).
        climatology: ``"test"`` (temporal mean of the evaluated truth) or
            ``"train"`` (uses ``train_climatology``) for ACC anomalies.
        mask_source: ``"none"``, ``"nan"`` (mask where the truth is NaN) or
            ``"extreme"`` (per-timestep masks from ``extreme_masks``).
        leads: restrict evaluation to these lead times (hours).
    """

    metrics: Sequence[str] = ("rmse", "acc")
    climatology: str = "test"
    train_climatology: ClimatologyMap | None = None
    mask_source: str = "none"
    extreme_masks: ExtremeMaskSeries | None = None
    leads: Sequence[int] | None = None
    split: str = "test"
    mask_id: str = ""
    weights: LatWeights | np.ndarray | None = None
    mean_bias_maps: bool = True
    threads: int | None = None
    ddof: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if not self.metrics:
            raise ConfigurationError("at least one metric is required")
        for m in self.metrics:
            if m not in metrics.DETERMINISTIC_METRICS:
                raise ConfigurationError(f"unknown metric {m!r}")
        if self.climatology not in ("test", "train"):
            raise ConfigurationError(f"climatology must be 'test' or 'train', not {self.climatology!r}")
        if self.climatology == "train" and self.train_climatology is None and "acc" in self.metrics:
            raise ConfigurationError("climatology='train' needs train_climatology")
        if self.mask_source not in ("none", "nan", "extreme"):
            raise ConfigurationError(f"unknown mask source {self.mask_source!r}")
        if self.mask_source == "extreme" and self.extreme_masks is None:
            raise ConfigurationError("mask_source='extreme' needs extreme_masks")
        if not self.mask_id:
            self.mask_id = self.mask_source


def _weights_for(truth: SampleSet, cfg: EvalConfig) -> np.ndarray:
    if cfg.weights is not None:
        return np.asarray(getattr(cfg.weights, "w", cfg.weights), dtype=np.float64)
    if truth.target_grid is not None:
        return make_lat_weights(truth.target_grid).w
    return np.ones(truth.targets.shape[2])


def _record(report_rows, metric, var, lead, cfg, fn, tags=None):
    try:
        value = fn()
    except UndefinedMetricError as exc:
        report_rows.append(
            MetricRecord(metric, var, lead, cfg.split, cfg.mask_id, None, False, dict(tags or {}), str(exc))
        )
    else:
        report_rows.append(MetricRecord(metric, var, lead, cfg.split, cfg.mask_id, float(value), True, dict(tags or {})))


def _cell_mask(truth: SampleSet, cfg: EvalConfig, sel: np.ndarray, t: np.ndarray, lead: int):
    mask = None
    if truth.target_mask is not None:
        mask = np.broadcast_to(truth.target_mask, t.shape)
    if cfg.mask_source == "nan":
        finite = ~np.isnan(t)
        mask = finite if mask is None else (mask & finite)
    elif cfg.mask_source == "extreme":
        valid_times = truth.times[sel] + lead * 3600
        em = cfg.extreme_masks.select(valid_times)
        mask = em if mask is None else (mask & em)
    return mask


def _evaluate_cell(preds, truth, cfg, weights, c, lead, tags):
    var = truth.target_names[c]
    sel = np.flatnonzero(truth.leads == lead)
    p = np.asarray(preds.data[sel, c], dtype=np.float64)
    t = np.asarray(truth.targets[sel, c], dtype=np.float64)
    mask = _cell_mask(truth, cfg, sel, t, lead)
    if cfg.mask_source == "nan":
        t, p, _ = metrics.apply_nan_mask(t, p)
    clim = None
    if "acc" in cfg.metrics:
        if cfg.climatology == "train":
            f = np.asarray(cfg.train_climatology.field, dtype=np.float64)
            clim = ClimatologyMap(f[c] if f.ndim == 3 else f, "train")
        else:
            clim = metrics.truth_climatology(t, mask)
    rows: list[MetricRecord] = []
    static_mask = None
    if mask is not None and np.all(mask == mask[:1]):
        static_mask = np.asarray(mask[0])
    for name in cfg.metrics:
        if name in ("nrmse_s", "nrmse_g", "total"):
            if mask is not None and static_mask is None:
                rows.append(
                    MetricRecord(name, var, lead, cfg.split, cfg.mask_id, None, False, dict(tags),
                                 "projection metrics need a time-invariant mask")
                )
                continue
            _record(rows, name, var, lead, cfg, lambda n=name: metrics.deterministic(n, p, t, weights, static_mask), tags)
        else:
            _record(rows, name, var, lead, cfg, lambda n=name: metrics.deterministic(n, p, t, weights, mask, clim), tags)
    bias_map = metrics.per_pixel_mean_bias(p, t, mask) if cfg.mean_bias_maps else None
    return var, lead, rows, bias_map


def _lead_key(lead) -> str:
    return f"{int(lead)}h"


def evaluate_direct(preds: PredictionSet, truth: SampleSet, cfg: EvalConfig, tags: Mapping | None = None) -> MetricReport:
    """Score aligned predictions: one record per (variable, lead, metric).

    Cells run concurrently (``cfg.threads``) but are assembled in
    (variable, lead, metric) order, so reports are reproducible.
    """
    check_alignment(preds, truth)
    weights = _weights_for(truth, cfg)
    leads = sorted(int(x) for x in np.unique(truth.leads))
    if cfg.leads is not None:
        leads = [x for x in leads if x in set(int(v) for v in cfg.leads)]
    cells = [(c, lead) for c in range(len(truth.target_names)) for lead in leads]
    tags = dict(tags or {"protocol": "direct"})
    threads = cfg.threads or default_threads()
    if threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda cl: _evaluate_cell(preds, truth, cfg, weights, cl[0], cl[1], tags), cells))
    else:
        results = [_evaluate_cell(preds, truth, cfg, weights, c, lead, tags) for c, lead in cells]
    report = MetricReport(
        metadata={
            "source": preds.source,
            "split": cfg.split,
            "mask_id": cfg.mask_id,
            "climatology": cfg.climatology,
            "metrics": list(cfg.metrics),
            "protocol": tags.get("protocol", "direct"),
        }
    )
    for var, lead, rows, bias_map in results:
        for r in rows:
            report.add(r)
        if bias_map is not None:
            key = f"mean_bias/{var}/{_lead_key(lead)}"
            report.maps[key] = bias_map
            if truth.target_grid is not None:
                report.map_grids[key] = truth.target_grid
    return report


def evaluate_continuous(
    preds_by_lead: Mapping[int, PredictionSet],
    truth_by_lead: Mapping[int, SampleSet],
    cfg: EvalConfig,
    training_range_hours: tuple[float, float] = (6, 120),
) -> MetricReport:
    """Score one lead-conditioned model at several leads.

    Leads outside ``training_range_hours`` are tagged ``extrapolated``.
    """
    leads = list(cfg.leads) if cfg.leads is not None else sorted(preds_by_lead)
    report = MetricReport(metadata={"protocol": "continuous", "training_range_hours": list(training_range_hours)})
    lo, hi = training_range_hours
    for lead in leads:
        if lead not in preds_by_lead or lead not in truth_by_lead:
            raise ConfigurationError(f"missing predictions or truth for lead {lead}h")
        tags = {"protocol": "continuous", "extrapolated": not (lo <= lead <= hi)}
        sub = evaluate_direct(preds_by_lead[lead], truth_by_lead[lead], cfg, tags=tags)
        report.records.extend(sub.records)
        report.maps.update(sub.maps)
        report.map_grids.update(sub.map_grids)
        report.metadata.setdefault("source", sub.metadata.get("source"))
        report.metadata.update({k: v for k, v in sub.metadata.items() if k != "protocol"})
    report.metadata["protocol"] = "continuous"
    return report


# ---------------------------------------------------------------------------
# rollout


@dataclass(eq=False)
class Trajectory:
    predictions: np.ndarray  # n_steps x N x C_out x H x W
    lead_hours: np.ndarray
    names: list[str]

    def at_lead(self, hours: int) -> np.ndarray:
        hits = np.flatnonzero(self.lead_hours == hours)
        if hits.size != 1:
            raise KeyError(f"lead {hours}h is not on the rollout trajectory")
        return self.predictions[hits[0]]


def rollout(
    step_model: Callable[[np.ndarray], np.ndarray],
    init_inputs: np.ndarray,
    input_names: Sequence[str],
    output_names: Sequence[str],
    n_steps: int,
    base_step_hours: int = 6,
    forcing: Callable[[str, int], np.ndarray] | None = None,
    forcing_vars: Sequence[str] = (),
) -> Trajectory:
    """Feed a single-step model its own outputs ``n_steps`` times.

    ``input_names`` follow the sampler's channel naming.  Static channels
    (and ``lead_time``) are re-attached unchanged from ``init_inputs``;
    channels of ``forcing_vars`` are read via ``forcing(var, step_index)``
    where the index counts base steps from the initial time.  The model must
    emit every other dynamic input variable.
    """
    x0 = np.asarray(init_inputs, dtype=np.float64)
    if x0.ndim != 4 or x0.shape[1] != len(input_names):
        raise ConfigurationError(f"init inputs {x0.shape} do not match {len(input_names)} channel names")
    layout = []
    dynamic = []
    for c, name in enumerate(input_names):
        var, off = parse_channel(name)
        if off is None or name == LEAD_CHANNEL:
            layout.append(("static", var, c))
            continue
        if off % base_step_hours:
            raise RolloutIncompatibleError(f"offset {off}h of {name!r} is not a multiple of {base_step_hours}h")
        layout.append(("dynamic", var, off // base_step_hours))
        if var not in dynamic:
            dynamic.append(var)
    forcing_vars = list(forcing_vars)
    required = [v for v in dynamic if v not in forcing_vars]
    if set(required) != set(output_names) or len(set(output_names)) != len(output_names):
        raise RolloutIncompatibleError(
            f"model outputs {list(output_names)} but rollout needs exactly {required}"
        )
    if forcing_vars and forcing is None:
        raise RolloutIncompatibleError("forcing variables declared without a forcing provider")
    out_pos = {v: i for i, v in enumerate(output_names)}
    history: dict[str, dict[int, np.ndarray]] = {v: {} for v in dynamic}
    for c, (kind, var, off) in enumerate(layout):
        if kind == "dynamic":
            history[var][off] = x0[:, c]
    N, _, H, W = x0.shape
    traj = np.empty((n_steps, N, len(output_names), H, W))
    for s in range(n_steps):
        x = np.empty_like(x0)
        for c, (kind, var, off) in enumerate(layout):
            if kind == "static":
                x[:, c] = x0[:, c]
            elif var in forcing_vars:
                x[:, c] = forcing(var, s + off) if s + off > 0 else history[var][s + off]
            else:
                try:
                    x[:, c] = history[var][s + off]
                except KeyError:
                    raise RolloutIncompatibleError(
                        f"no state for {var!r} at step {s + off}; offsets must be contiguous multiples of the base step"
                    ) from None
        y = np.asarray(step_model(x), dtype=np.float64)
        if y.shape != (N, len(output_names), H, W):
            raise RolloutIncompatibleError(f"step model returned shape {y.shape}")
        traj[s] = y
        for v in required:
            history[v][s + 1] = y[:, out_pos[v]]
    return Trajectory(traj, base_step_hours * np.arange(1, n_steps + 1), list(output_names))


def persistence_step(input_names: Sequence[str], output_names: Sequence[str]) -> Callable[[np.ndarray], np.ndarray]:
    """Step model returning each output variable's offset-0 channel."""
    idx = []
    for v in output_names:
        matches = [i for i, n in enumerate(input_names) if parse_channel(n) == (v, 0)]
        if not matches:
            raise ConfigurationError(f"no offset-0 channel for {v!r}")
        idx.append(matches[0])
    return lambda x: np.asarray(x)[:, idx]


# ---------------------------------------------------------------------------
# probabilistic


def evaluate_probabilistic(
    forecast: EnsembleForecast | GaussianForecast,
    truth: SampleSet,
    cfg: EvalConfig | None = None,
) -> MetricReport:
    """Spread, spread-skill ratio, CRPS and (ensembles) rank histograms.

    Ensembles carry members as ``M x N x C x H x W``; Gaussian forecasts
    ``mu``/``sigma`` as ``N x C x H x W``.  Ensemble CRPS uses the Gaussian
    closed form with per-pixel member mean and std (an approximation, tagged
    as such).
    """
    cfg = cfg or EvalConfig(metrics=("rmse",))
    weights = _weights_for(truth, cfg)
    report = MetricReport(metadata={"protocol": "probabilistic", "split": cfg.split, "mask_id": cfg.mask_id})
    if isinstance(forecast, EnsembleForecast):
        members = np.asarray(forecast.members, dtype=np.float64)
        if members.ndim != 5 or members.shape[1:] != truth.targets.shape:
            raise AlignmentError(f"ensemble shape {members.shape} does not match targets {truth.targets.shape}")
        if members.shape[0] < 2:
            raise ConfigurationError("Gaussian CRPS requested on an ensemble with fewer than 2 members")
        kind = "ensemble"
    elif isinstance(forecast, GaussianForecast):
        mu = np.asarray(forecast.mu, dtype=np.float64)
        sigma = np.asarray(forecast.sigma, dtype=np.float64)
        if mu.shape != truth.targets.shape or sigma.shape != mu.shape:
            raise AlignmentError("Gaussian forecast does not match target shape")
        kind = "gaussian"
    else:
        raise ConfigurationError(f"unsupported forecast type {type(forecast).__name__}")
    leads = sorted(int(x) for x in np.unique(truth.leads))
    for c, var in enumerate(truth.target_names):
        for lead in leads:
            sel = np.flatnonzero(truth.leads == lead)
            t = np.asarray(truth.targets[sel, c], dtype=np.float64)
            mask = _cell_mask(truth, cfg, sel, t, lead)
            rows: list[MetricRecord] = []
            if kind == "ensemble":
                e = members[:, sel, c]
                tags = {"crps": "gaussian-moment-approximation", "ddof": cfg.ddof}
                _record(rows, "spread", var, lead, cfg, lambda: metrics.spread(e, weights, mask, ddof=cfg.ddof), tags)
                _record(rows, "spread_skill", var, lead, cfg,
                        lambda: metrics.spread_skill_ratio(e, t, weights, mask, ddof=cfg.ddof), tags)
                _record(rows, "crps", var, lead, cfg,
                        lambda: metrics.crps_ensemble_gaussian(e, t, mask, ddof=cfg.ddof), tags)
                key = f"rank_histogram/{var}/{_lead_key(lead)}"
                report.histograms[key] = metrics.rank_histogram(e, t, mask, rng_seed=cfg.rng_seed)
            else:
                m_, s_ = mu[sel, c], sigma[sel, c]
                _record(rows, "spread", var, lead, cfg, lambda: metrics.spread_from_sigma(s_, weights, mask))

                def ratio():
                    skill = metrics.lat_rmse(m_, t, weights, mask)
                    if skill == 0:
                        raise UndefinedMetricError("spread_skill: zero RMSE")
                    return metrics.spread_from_sigma(s_, weights, mask) / skill

                _record(rows, "spread_skill", var, lead, cfg, ratio)
                _record(rows, "crps", var, lead, cfg, lambda: metrics.crps_gaussian(m_, s_, t, mask))
            for r in rows:
                report.add(r)
    return report


# ---------------------------------------------------------------------------
# output


def _slug(key: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "__", key)


def write_pgm(path, image: np.ndarray) -> dict:
    """Binary P5 graymap, min-max scaled to 0..255; NaN renders black."""
    a = np.asarray(image, dtype=np.float64)
    finite = np.isfinite(a)
    lo = float(a[finite].min()) if finite.any() else 0.0
    hi = float(a[finite].max()) if finite.any() else 0.0
    scale = (hi - lo) if hi > lo else 1.0
    pix = np.where(finite, np.round((a - lo) / scale * 255.0), 0).astype(np.uint8)
    H, W = pix.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(pix.tobytes())
    return {"min": lo, "max": hi, "levels": 255, "width": W, "height": H}


def _histogram_image(counts: np.ndarray, height: int = 64, bar: int = 8) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    top = counts.max() if counts.size and counts.max() > 0 else 1.0
    img = np.zeros((height, bar * counts.size))
    for k, v in enumerate(counts):
        h = int(round(v / top * height))
        img[height - h :, k * bar : (k + 1) * bar - 1] = v
    return img


def emit_report(report: MetricReport, fmt: str, out) -> list[Path]:
    """Write ``report`` as ``json``, ``csv`` or ``maps`` (a directory).

    ``maps`` stores each per-pixel map and rank histogram as a CLBT container
    with a PGM preview and a JSON sidecar recording the grey-level scale.
    """
    if report.is_empty():
        raise ConfigurationError("refusing to emit an empty report")
    out = Path(out)
    if fmt == "json":
        out.write_text(report.to_json())
        return [out]
    if fmt == "csv":
        out.write_text(report.to_csv())
        return [out]
    if fmt != "maps":
        raise ConfigurationError(f"unknown report format {fmt!r}")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for key, field_ in sorted(report.maps.items()):
        base = out / _slug(key)
        grid = report.map_grids.get(key)
        a = np.asarray(field_, dtype=np.float64)
        if grid is None:
            H, W = a.shape
            grid = Grid(np.linspace(-89.0, 89.0, H) if H > 1 else [0.0], np.arange(W) * (359.0 / max(W, 1)))
        write_container(
            FieldSeries(grid, [Variable(key.split("/")[0])], [0], a[None, None], attrs={"kind": "map", "key": key},
                        time_step_seconds=86400),
            f"{base}.clbt",
        )
        # North up: flip when rows run south to north.
        img = a[::-1] if grid.H > 1 and grid.lats[0] < grid.lats[-1] else a
        scale = write_pgm(f"{base}.pgm", img)
        scale.update({"key": key, "north_up": True})
        Path(f"{base}.pgm.json").write_text(json.dumps(scale, indent=2))
        written += [Path(f"{base}.clbt"), Path(f"{base}.pgm"), Path(f"{base}.pgm.json")]
    for key, counts in sorted(report.histograms.items()):
        base = out / _slug(key)
        counts = np.asarray(counts)
        grid = Grid([0.0], np.arange(counts.size, dtype=np.float64))
        write_container(
            FieldSeries(grid, [Variable("count")], [0], counts.astype(np.float32)[None, None, None],
                        attrs={"kind": "rank_histogram", "key": key}, time_step_seconds=86400),
            f"{base}.clbt",
        )
        scale = write_pgm(f"{base}.pgm", _histogram_image(counts))
        scale.update({"key": key, "counts": [int(x) for x in counts]})
        Path(f"{base}.pgm.json").write_text(json.dumps(scale, indent=2))
        written += [Path(f"{base}.clbt"), Path(f"{base}.pgm"), Path(f"{base}.pgm.json")]
    return written
