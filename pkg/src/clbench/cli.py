"""Command-line entry point: ``clbench <subcommand> [options]``.

Every subcommand accepts ``--config FILE`` (flat ``key = value`` lines, ``#``
comments); flags given on the command line override the file.  The effective
configuration is echoed to stderr before work starts.  Exit codes: 0 success,
1 usage error, 2 data or validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import zlib
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from clbench import baselines, extreme, harness, regrid
from clbench.errors import AlignmentError, ClbenchError
from clbench.grid import CONUS, GLOBAL, Grid, RegionBox, grid_from_resolution
from clbench.metrics import ClimatologyMap
from clbench.report import MetricReport
from clbench.sampler import SampleSet, forecasting_samples
from clbench.store import (
    FieldSeries,
    SplitSpec,
    Variable,
    compute_norm_stats,
    read_container,
    split_by_years,
    write_container,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
REGIONS = {"global": GLOBAL, "conus": CONUS}


class UsageError(Exception):
    """Bad or missing command-line options."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def stream(seed: int, name: str) -> np.random.Generator:
    """Named random sub-stream derived from the run seed."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))]))


# ---------------------------------------------------------------------------
# option parsing helpers


def _str_list(text: str) -> list[str]:
    return [t for t in (p.strip() for p in str(text).replace(";", ",").split(",")) if t]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in _str_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in _str_list(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _year_range(text: str) -> tuple[int, int]:
    parts = str(text).split("-")
    try:
        if len(parts) == 1:
            return int(parts[0]), int(parts[0])
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise argparse.ArgumentTypeError(f"expected YEAR or YEAR-YEAR, got {text!r}")


def _bool(text) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _timestamp(text: str) -> int:
    t = str(text).strip()
    try:
        return int(t)
    except ValueError:
        pass
    try:
        dt = datetime.fromisoformat(t.replace("Z", "+00:00"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected unix seconds or ISO-8601 time, got {text!r}") from None
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def read_config(path) -> dict[str, str]:
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value, got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _apply_config(parser: argparse.ArgumentParser, cfg: dict[str, str]) -> None:
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in cfg.items():
        if key not in actions:
            raise UsageError(f"config key {key!r} is not an option of {parser.prog!r}")
        a = actions[key]
        if isinstance(a, argparse._StoreTrueAction):
            try:
                defaults[key] = _bool(value)
            except argparse.ArgumentTypeError as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        elif a.nargs in ("+", "*"):
            defaults[key] = [t for t in value.replace(",", " ").split() if t]
        elif a.type is not None and a.type is not str:
            try:
                defaults[key] = a.type(value)
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from None
        else:
            defaults[key] = value
        if a.choices is not None and defaults[key] not in a.choices:
            raise UsageError(f"config key {key!r}: {value!r} is not one of {list(a.choices)}")
    parser.set_defaults(**defaults)


def _need(args, *names):
    for name in names:
        if getattr(args, name, None) in (None, "", []):
            raise UsageError(f"{args.command}: missing required option --{name.replace('_', '-')}")


def _echo_config(args) -> None:
    lines = ["# clbench effective config"]
    for k in sorted(vars(args)):
        if k.startswith("_") or k == "func":
            continue
        v = getattr(args, k)
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        lines.append(f"{k} = {v}")
    print("\n".join(lines), file=sys.stderr)


# ---------------------------------------------------------------------------
# gen-synthetic


def _smooth_unit(noise: np.ndarray) -> np.ndarray:
    """Periodic-in-longitude 3x3 binomial smoothing rescaled to unit variance."""
    k = np.array([0.25, 0.5, 0.25])
    x = sum(w * np.roll(noise, s, axis=-1) for w, s in zip(k, (-1, 0, 1)))
    H = noise.shape[-2]
    y = np.zeros_like(x)
    row_var = np.zeros(H)
    for w, s in zip(k, (-1, 0, 1)):
        lo, hi = max(0, -s), min(H, H - s)
        y[..., lo:hi, :] += w * x[..., lo + s : hi + s, :]
        row_var[lo:hi] += w * w
    # Longitude pass contributes sum(k^2) = 0.375 to the variance.
    return y / np.sqrt(row_var * 0.375)[:, None]


def generate_synthetic(
    variables, resolution, start_year, end_year, step_hours, rho, sigma, mean, lat_gradient, seed
) -> FieldSeries:
    """Stationary AR(1) fields: marginal std ``sigma`` at every pixel.

    ``x_t = rho x_{t-1} + sqrt(1 - rho^2) sigma e_t`` where ``e_t`` is
    spatially smoothed unit-variance noise; ``x_0`` starts in the stationary
    distribution.  The mean field is ``mean - lat_gradient sin^2(lat)``.
    """
    grid = grid_from_resolution(resolution)
    t0 = int(datetime(start_year, 1, 1, tzinfo=timezone.utc).timestamp())
    t1 = int(datetime(end_year + 1, 1, 1, tzinfo=timezone.utc).timestamp())
    step = int(round(step_hours * 3600))
    times = np.arange(t0, t1, step, dtype=np.int64)
    T, H, W = times.size, grid.H, grid.W
    base = mean - lat_gradient * np.sin(np.deg2rad(grid.lats)) ** 2
    data = np.empty((T, len(variables), H, W), dtype=np.float32)
    c = np.sqrt(1.0 - rho * rho) * sigma
    for ci, var in enumerate(variables):
        eps = _smooth_unit(stream(seed, f"gen-synthetic/{var}").standard_normal((T, H, W)))
        x0 = sigma * eps[0]
        x = np.empty((T, H, W))
        x[0] = x0
        if T > 1:
            x[1:] = lfilter([c], [1.0, -rho], eps[1:], axis=0, zi=(rho * x0)[None])[0]
        data[:, ci] = x + base[:, None]
    return FieldSeries(
        grid=grid,
        variables=[Variable(v, "K") for v in variables],
        times=times,
        data=data,
        attrs={"kind": "synthetic"},
        time_step_seconds=step,
    )


def cmd_gen_synthetic(args) -> None:
    _need(args, "out")
    if not -1.0 < args.rho < 1.0:
        raise UsageError("--rho must lie in (-1, 1)")
    if args.sigma <= 0:
        raise UsageError("--sigma must be positive")
    series = generate_synthetic(
        args.vars, args.resolution, args.start_year, args.end_year, args.step_hours,
        args.rho, args.sigma, args.mean, args.lat_gradient, args.seed,
    )
    write_container(series, args.out)
    T, C, H, W = series.data.shape
    manifest = {
        "T": T, "C": C, "H": H, "W": W,
        "vars": list(args.vars),
        "rho": args.rho, "sigma": args.sigma, "mean": args.mean, "lat_gradient": args.lat_gradient,
        "seed": args.seed, "step_hours": args.step_hours, "resolution": args.resolution,
    }
    Path(args.manifest or f"{args.out}.manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"wrote {args.out}: T={T} C={C} H={H} W={W}")


# ---------------------------------------------------------------------------
# ingest


def _axis_grid(lats, lons) -> Grid:
    lats = np.unique(lats)
    lons = np.unique(lons)
    periodic = False
    if lons.size > 1:
        d = np.diff(lons)
        periodic = bool(np.ptp(d) < 1e-9 and abs(lons.size * d[0] - 360.0) < 1e-6)
    return Grid(lats, lons, periodic)


def ingest_csv(path, step_seconds: int | None = None) -> FieldSeries:
    """Long-format CSV with columns ``time, variable, lat, lon, value``.

    Times are unix seconds or ISO-8601; cells absent from the file are NaN.
    """
    rows = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = {"time", "variable", "lat", "lon", "value"} - set(reader.fieldnames or ())
        if missing:
            raise AlignmentError(f"{path}: CSV lacks columns {sorted(missing)}")
        for n, r in enumerate(reader, 2):
            try:
                rows.append((_timestamp(r["time"]), r["variable"], float(r["lat"]), float(r["lon"]),
                             float(r["value"]) if r["value"].strip() else np.nan))
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise AlignmentError(f"{path}:{n}: {exc}") from None
    if not rows:
        raise AlignmentError(f"{path}: no data rows")
    t, v, la, lo, val = zip(*rows)
    names = list(dict.fromkeys(v))
    grid = _axis_grid(la, lo)
    times = np.unique(np.asarray(t, dtype=np.int64))
    if step_seconds and times.size > 1:
        times = np.arange(times[0], times[-1] + 1, step_seconds, dtype=np.int64)
    data = np.full((times.size, len(names), grid.H, grid.W), np.nan, dtype=np.float32)
    ti = np.searchsorted(times, t)
    if np.any(times[np.minimum(ti, times.size - 1)] != np.asarray(t)):
        raise AlignmentError(f"{path}: timestamps are not on a {step_seconds}s step")
    ci = np.asarray([names.index(x) for x in v])
    hi = np.searchsorted(grid.lats, la)
    wi = np.searchsorted(grid.lons, lo)
    data[ti, ci, hi, wi] = val
    return FieldSeries(grid, [Variable(n) for n in names], times, data, attrs={"source": Path(path).name})


def ingest_raw(path, dims, variables, resolution, time_start, step_hours) -> FieldSeries:
    """Headerless little-endian binary32 ``T x C x H x W`` array."""
    if len(dims) != 4:
        raise UsageError("--dims needs T,C,H,W")
    T, C, H, W = dims
    if len(variables) != C:
        raise UsageError(f"--vars names {len(variables)} variables but --dims says C={C}")
    data = np.fromfile(path, dtype="<f4")
    if data.size != T * C * H * W:
        raise AlignmentError(f"{path}: {data.size} values, expected {T * C * H * W}")
    grid = grid_from_resolution(resolution)
    if grid.shape != (H, W):
        raise AlignmentError(f"{resolution} degree grid is {grid.shape}, --dims says {(H, W)}")
    step = int(round(step_hours * 3600))
    times = time_start + step * np.arange(T, dtype=np.int64)
    return FieldSeries(grid, [Variable(n) for n in variables], times, data.reshape(T, C, H, W),
                       attrs={"source": Path(path).name}, time_step_seconds=step)


def cmd_ingest(args) -> None:
    _need(args, "input", "out")
    if args.format == "csv":
        step = int(round(args.step_hours * 3600)) if args.step_hours else None
        series = ingest_csv(args.input, step)
    else:
        _need(args, "dims", "vars", "resolution", "time_start")
        series = ingest_raw(args.input, args.dims, args.vars, args.resolution, args.time_start, args.step_hours or 6)
    write_container(series, args.out)
    print(f"wrote {args.out}: {series.data.shape}")


# ---------------------------------------------------------------------------
# data preparation


def _split_spec(args) -> SplitSpec:
    return SplitSpec(tuple(args.train_years), tuple(args.val_years), tuple(args.test_years))


def cmd_stats(args) -> None:
    _need(args, "input", "out")
    series = read_container(args.input)
    stats = compute_norm_stats(series, _split_spec(args))
    Path(args.out).write_text(json.dumps(stats.to_json(), indent=2) + "\n")
    print(f"wrote {args.out}")


def cmd_split(args) -> None:
    _need(args, "input", "out_dir")
    series = read_container(args.input)
    if args.stride > 1:
        series = series.subsample(args.stride)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), split_by_years(series, _split_spec(args))):
        write_container(part.replace(attrs={**part.attrs, "split": name}), out / f"{name}.clbt")
        print(f"wrote {out / f'{name}.clbt'}: T={part.T}")


def cmd_regrid(args) -> None:
    _need(args, "input", "out", "to")
    series = read_container(args.input)
    dst = grid_from_resolution(args.to)
    fn = regrid.regrid_bilinear if args.scheme == "bilinear" else regrid.regrid_nearest
    data = fn(series.data, series.grid, dst)
    write_container(series.replace(grid=dst, data=data), args.out)
    print(f"wrote {args.out}: {dst.H}x{dst.W}")


def _region(text: str) -> RegionBox:
    if text.lower() in REGIONS:
        return REGIONS[text.lower()]
    vals = _float_list(text)
    if len(vals) != 4:
        raise UsageError(f"--region must be a name {sorted(REGIONS)} or lat_min,lat_max,lon_min,lon_max")
    return RegionBox(*vals)


def cmd_crop(args) -> None:
    _need(args, "input", "out")
    series = read_container(args.input)
    block, sub = regrid.crop(series.data, series.grid, _region(args.region))
    attrs = dict(series.attrs)
    if args.pad:
        if len(args.pad) != 2:
            raise UsageError("--pad needs H,W")
        H, W = args.pad
        block, _ = regrid.pad_to(block, H, W, fill=0.0)
        attrs["pad_valid"] = [0, sub.H, 0, sub.W]
        # Padded cells continue the subgrid's spacing so the container stays a regular grid.
        dlat = sub.lats[1] - sub.lats[0] if sub.H > 1 else 1.0
        dlon = sub.dlon if sub.W > 1 else 1.0
        lats = sub.lats[0] + dlat * np.arange(H)
        lons = sub.lons[0] + dlon * np.arange(W)
        if np.any(np.abs(lats) > 90) or lons[-1] >= 360:
            raise UsageError(f"padding to {H}x{W} runs off the globe; choose a smaller --pad")
        sub = Grid(lats, lons, False)
    write_container(series.replace(grid=sub, data=block, attrs=attrs), args.out)
    print(f"wrote {args.out}: {sub.H}x{sub.W}")


# ---------------------------------------------------------------------------
# extremes


def cmd_extreme_thresholds(args) -> None:
    _need(args, "train", "out")
    train = read_container(args.train)
    thr = extreme.compute_thresholds(
        train, args.variable, args.window_days, tuple(args.percentiles), args.min_samples, args.renormalize
    )
    write_container(thr.to_series(), args.out)
    print(f"wrote {args.out}")


def cmd_extreme_masks(args) -> None:
    _need(args, "test", "thresholds", "out")
    test = read_container(args.test)
    thr = extreme.ThresholdField.from_series(read_container(args.thresholds))
    context = read_container(args.context) if args.context else None
    masks = extreme.build_masks(
        test, thr, args.variable, context, args.window_days, strict=not args.inclusive, renormalize=args.renormalize
    )
    write_container(masks.to_series(), args.out)
    print(f"wrote {args.out}: {masks.times.size} masks, extreme fraction {masks.fraction():.4f}")


# ---------------------------------------------------------------------------
# baselines


def _lead_hours(args, series: FieldSeries) -> int:
    return int(round(series.step_hours)) if args.lead_hours is None else int(args.lead_hours)


def _samples(args, series: FieldSeries, lead: int, context=None) -> SampleSet:
    return forecasting_samples(series, args.history, lead, args.in_vars or None, args.out_vars or None, context)


def _write_preds(args, data, names, times, lead, grid, task="forecasting", protocol="direct") -> None:
    preds = harness.PredictionSet(data, list(names), times, lead, source=args.model, grid=grid)
    harness.write_predictions(preds, args.out, task=task, protocol=protocol, model_tag=args.model, split=args.split)
    print(f"wrote {args.out}: N={len(times)} lead={lead}h")


def cmd_baseline(args) -> None:
    if args.action == "fit":
        _need(args, "train", "out")
        train = read_container(args.train)
        if args.model == "climatology":
            clim = baselines.climatology_forecast(train, args.out_vars or None)
            names = args.out_vars or train.names
            write_container(
                FieldSeries(train.grid, [Variable(n) for n in names], [train.times[0]], clim.field[None],
                            attrs={"kind": "climatology", "source": "train"}, time_step_seconds=train.time_step_seconds),
                args.out,
            )
        elif args.model == "linreg":
            lead = _lead_hours(args, train)
            model = baselines.linreg_fit(_samples(args, train, lead), mode=args.mode, k=args.k, ridge=args.ridge)
            model.info["lead_hours"] = lead
            model.info["history_hours"] = list(args.history)
            baselines.save_model(model, args.out)
        else:
            raise UsageError(f"baseline fit: model {args.model!r} has nothing to fit")
        print(f"wrote {args.out}")
        return
    _need(args, "input", "out")
    series = read_container(args.input)
    if args.model == "interp":
        _need(args, "to")
        dst = grid_from_resolution(args.to)
        data = baselines.interp_downscale(series.data, series.grid, dst, args.scheme)
        _write_preds(args, data, series.names, series.times, 0, dst, task="downscaling")
        return
    context = read_container(args.context) if args.context else None
    if args.model == "climatology":
        _need(args, "model_file")
        cs = read_container(args.model_file)
        lead = _lead_hours(args, series)
        n = series.T - int(round(lead / series.step_hours))
        if n <= 0:
            raise AlignmentError(f"lead {lead}h leaves no valid target in {args.input}")
        data = baselines.predict_climatology(ClimatologyMap(cs.data[0].astype(np.float64), "train"), n)
        _write_preds(args, data, cs.names, series.times[:n], lead, series.grid)
    elif args.model == "persistence":
        lead = _lead_hours(args, series)
        s = _samples(args, series, lead, context)
        _write_preds(args, baselines.persistence_forecast(s), s.target_names, s.times, lead, series.grid)
    else:
        _need(args, "model_file")
        model = baselines.load_model(args.model_file)
        lead = int(model.info.get("lead_hours", _lead_hours(args, series)))
        args.history = model.info.get("history_hours", args.history)
        in_vars = sorted({n.split("@")[0] for n in model.input_names if n != "lead_time"},
                         key=lambda v: series.index(v))
        s = forecasting_samples(series, args.history, lead, in_vars, model.output_names, context)
        data = baselines.linreg_predict(model, s.inputs, s.input_names)
        _write_preds(args, data, s.target_names, s.times, lead, series.grid)


# ---------------------------------------------------------------------------
# evaluation


def truth_for(preds: harness.PredictionSet, truth: FieldSeries) -> SampleSet:
    """Targets at each prediction's valid time, looked up in ``truth``."""
    if preds.grid is not None and preds.grid != truth.grid:
        raise AlignmentError(f"prediction grid {preds.grid.shape} differs from truth grid {truth.grid.shape}")
    valid = preds.times + preds.leads * 3600
    pos = np.searchsorted(truth.times, valid)
    ok = (pos < truth.T) & (truth.times[np.minimum(pos, truth.T - 1)] == valid)
    if not ok.all():
        raise AlignmentError(f"{int((~ok).sum())} prediction valid times are missing from the truth series")
    idx = [truth.index(n) for n in preds.names]
    mask = None
    if "pad_valid" in truth.attrs:
        r0, h, c0, w = truth.attrs["pad_valid"]
        mask = np.zeros(truth.grid.shape, bool)
        mask[r0 : r0 + h, c0 : c0 + w] = True
    N = preds.times.size
    return SampleSet(
        inputs=np.empty((N, 0) + truth.grid.shape, dtype=np.float32),
        targets=truth.data[pos][:, idx],
        leads=preds.leads,
        input_names=[],
        target_names=list(preds.names),
        times=preds.times,
        input_grid=truth.grid,
        target_grid=truth.grid,
        target_mask=mask,
    )


def _eval_config(args) -> harness.EvalConfig:
    train_clim = None
    if args.climatology == "train":
        _need(args, "train_climatology")
        cs = read_container(args.train_climatology)
        train_clim = ClimatologyMap(cs.data[0].astype(np.float64), "train")
    masks = None
    mask_source = args.mask
    if args.extreme_masks:
        masks = extreme.ExtremeMaskSeries.from_series(read_container(args.extreme_masks))
        mask_source = "extreme"
    return harness.EvalConfig(
        metrics=tuple(args.metrics),
        climatology=args.climatology,
        train_climatology=train_clim,
        mask_source=mask_source,
        extreme_masks=masks,
        leads=args.leads or None,
        split=args.split,
        threads=args.threads,
        rng_seed=int(stream(args.seed, "evaluate").integers(2**31)),
    )


def cmd_evaluate(args) -> None:
    _need(args, "preds", "truth", "out")
    truth = read_container(args.truth)
    cfg = _eval_config(args)
    preds = [harness.read_predictions(p) for p in args.preds]
    if args.protocol == "direct":
        if len(preds) != 1:
            raise UsageError("--protocol direct takes exactly one --preds file")
        report = harness.evaluate_direct(preds[0], truth_for(preds[0], truth), cfg)
    else:
        by_lead, truths = {}, {}
        for p in preds:
            lead = int(p.leads[0])
            if lead in by_lead:
                raise UsageError(f"two --preds files for lead {lead}h")
            by_lead[lead], truths[lead] = p, truth_for(p, truth)
        report = harness.evaluate_continuous(by_lead, truths, cfg, tuple(args.training_range))
    report.metadata["truth"] = Path(args.truth).name
    Path(args.out).write_text(report.to_json(include_maps=True) + "\n")
    for r in report.records:
        val = f"{r.value:.6g}" if r.defined else "undefined"
        print(f"{r.metric:>10s} {r.variable:>8s} {int(r.lead_hours):>5d}h {val}")


def cmd_rollout(args) -> None:
    _need(args, "input", "out_dir")
    series = read_container(args.input)
    context = read_container(args.context) if args.context else None
    if args.model == "linreg":
        _need(args, "model_file")
        model = baselines.load_model(args.model_file)
        base = int(model.info.get("lead_hours", round(series.step_hours)))
        history = model.info.get("history_hours", args.history)
        out_vars = model.output_names
        in_vars = sorted({n.split("@")[0] for n in model.input_names}, key=lambda v: series.index(v))
    elif args.model == "persistence":
        base = _lead_hours(args, series)
        history = args.history
        out_vars = args.out_vars or [v.name for v in series.variables if not v.static]
        in_vars = args.in_vars or series.names
    else:
        raise UsageError(f"rollout: model {args.model!r} is not a step model")
    s = forecasting_samples(series, history, base * args.steps, in_vars, out_vars, context)
    if args.model == "linreg":
        def step(x):
            return baselines.linreg_predict(model, x)
    else:
        step = harness.persistence_step(s.input_names, out_vars)
    traj = harness.rollout(step, s.inputs, s.input_names, out_vars, args.steps, base_step_hours=base)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, lead in enumerate(traj.lead_hours):
        preds = harness.PredictionSet(traj.predictions[k], out_vars, s.times, int(lead), args.model, series.grid)
        path = out / f"rollout_{int(lead)}h.clbt"
        harness.write_predictions(preds, path, protocol="iterative", model_tag=args.model, split=args.split)
        print(f"wrote {path}")


def cmd_report(args) -> None:
    _need(args, "input", "out")
    report = MetricReport.from_json(Path(args.input).read_text())
    for path in harness.emit_report(report, args.format, args.out):
        print(f"wrote {path}")


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file supplying defaults for any option")
    p.add_argument("--seed", type=int, default=0, help="root seed for all named random sub-streams")
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap (default: CLBENCH_THREADS or the number of cores)")


def _split_opts(p) -> None:
    p.add_argument("--train-years", type=_year_range, default=(1979, 2015), help="training years, e.g. 1979-2015")
    p.add_argument("--val-years", type=_year_range, default=(2016, 2016), help="validation years")
    p.add_argument("--test-years", type=_year_range, default=(2017, 2018), help="test years")


def _sample_opts(p) -> None:
    p.add_argument("--lead-hours", type=int, default=None, help="forecast lead (default: one data step)")
    p.add_argument("--history", type=_int_list, default=[0], help="input offsets in hours, e.g. -6,0")
    p.add_argument("--in-vars", type=_str_list, default=[], help="input variables (default: all)")
    p.add_argument("--out-vars", type=_str_list, default=[], help="output variables (default: all)")
    p.add_argument("--context", help="preceding split supplying history for the first windows")
    p.add_argument("--split", default="test", help="split label stored with predictions")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clbench", description="Weather and climate benchmarking engine.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write a seeded AR(1) synthetic series")
    _common(p)
    p.add_argument("--out", help="output container")
    p.add_argument("--manifest", help="manifest path (default: OUT.manifest.json)")
    p.add_argument("--vars", type=_str_list, default=["t2m"], help="variable names")
    p.add_argument("--resolution", type=float, default=11.25, help="grid spacing in degrees")
    p.add_argument("--start-year", type=int, default=1979, help="first year")
    p.add_argument("--end-year", type=int, default=2018, help="last year (inclusive)")
    p.add_argument("--step-hours", type=float, default=24.0, help="time step in hours")
    p.add_argument("--rho", type=float, default=0.8, help="lag-one autocorrelation per step")
    p.add_argument("--sigma", type=float, default=1.0, help="marginal standard deviation")
    p.add_argument("--mean", type=float, default=280.0, help="mean value at the equator")
    p.add_argument("--lat-gradient", type=float, default=30.0, help="mean drop from equator to pole")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("ingest", help="convert CSV or raw binary to a container")
    _common(p)
    p.add_argument("--format", choices=("csv", "raw"), default="csv", help="input format")
    p.add_argument("--input", help="input file")
    p.add_argument("--out", help="output container")
    p.add_argument("--dims", type=_int_list, default=None, help="raw: T,C,H,W")
    p.add_argument("--vars", type=_str_list, default=[], help="raw: variable names")
    p.add_argument("--resolution", type=float, default=None, help="raw: global grid spacing in degrees")
    p.add_argument("--time-start", type=_timestamp, default=None, help="raw: first time (unix or ISO-8601)")
    p.add_argument("--step-hours", type=float, default=None, help="time step in hours (csv: fill gaps)")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("stats", help="normalization statistics of the training years")
    _common(p)
    p.add_argument("--input", help="input container")
    p.add_argument("--out", help="output JSON")
    _split_opts(p)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="split by years into train/val/test containers")
    _common(p)
    p.add_argument("--input", help="input container")
    p.add_argument("--out-dir", help="directory for train.clbt, val.clbt, test.clbt")
    p.add_argument("--stride", type=int, default=1, help="keep every n-th time step")
    _split_opts(p)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("regrid", help="resample onto a global grid")
    _common(p)
    p.add_argument("--input", help="input container")
    p.add_argument("--out", help="output container")
    p.add_argument("--scheme", choices=("nearest", "bilinear"), default="bilinear", help="interpolation scheme")
    p.add_argument("--to", type=float, default=None, help="target grid spacing in degrees")
    p.set_defaults(func=cmd_regrid)

    p = sub.add_parser("crop", help="cut a lat-lon region")
    _common(p)
    p.add_argument("--input", help="input container")
    p.add_argument("--out", help="output container")
    p.add_argument("--region", default="conus", help="conus, global or lat_min,lat_max,lon_min,lon_max")
    p.add_argument("--pad", type=_int_list, default=None, help="zero-pad to H,W (valid block recorded)")
    p.set_defaults(func=cmd_crop)

    p = sub.add_parser("extreme-thresholds", help="per-pixel localized-mean percentiles")
    _common(p)
    p.add_argument("--train", help="training container")
    p.add_argument("--out", help="threshold container")
    p.add_argument("--variable", default=None, help="variable (default: first)")
    p.add_argument("--window-days", type=float, default=7.0, help="trailing window length in days")
    p.add_argument("--percentiles", type=_float_list, default=[5.0, 95.0], help="low,high percentiles")
    p.add_argument("--min-samples", type=int, default=100, help="minimum samples per pixel")
    p.add_argument("--renormalize", action="store_true", help="divide the stencil by the weights applied")
    p.set_defaults(func=cmd_extreme_thresholds)

    p = sub.add_parser("extreme-masks", help="per-timestep extreme masks for a test split")
    _common(p)
    p.add_argument("--test", help="test container")
    p.add_argument("--thresholds", help="threshold container")
    p.add_argument("--out", help="mask container")
    p.add_argument("--context", help="preceding split feeding the first windows")
    p.add_argument("--variable", default=None, help="variable (default: the thresholds' variable)")
    p.add_argument("--window-days", type=float, default=7.0, help="trailing window length in days")
    p.add_argument("--inclusive", action="store_true", help="count values equal to a threshold as extreme")
    p.add_argument("--renormalize", action="store_true", help="divide the stencil by the weights applied")
    p.set_defaults(func=cmd_extreme_masks)

    p = sub.add_parser("baseline", help="fit or run a baseline model")
    _common(p)
    p.add_argument("action", choices=("fit", "predict"), help="fit a model or write predictions")
    p.add_argument("--model", choices=("climatology", "persistence", "linreg", "interp"), default="climatology",
                   help="baseline")
    p.add_argument("--train", help="fit: training container")
    p.add_argument("--input", help="predict: container to forecast from")
    p.add_argument("--model-file", help="predict: fitted model (climatology container or CLLM file)")
    p.add_argument("--out", help="model file (fit) or prediction container (predict)")
    p.add_argument("--mode", choices=("local", "global"), default="local", help="linreg feature layout")
    p.add_argument("--k", type=int, default=3, help="linreg stencil width")
    p.add_argument("--ridge", type=float, default=0.0, help="linreg L2 penalty")
    p.add_argument("--to", type=float, default=None, help="interp: target grid spacing in degrees")
    p.add_argument("--scheme", choices=("nearest", "bilinear"), default="bilinear", help="interp scheme")
    _sample_opts(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", help="score prediction containers")
    _common(p)
    p.add_argument("--protocol", choices=("direct", "continuous"), default="direct", help="evaluation protocol")
    p.add_argument("--preds", nargs="+", type=str, default=[], help="prediction container(s)")
    p.add_argument("--truth", help="container holding the verifying fields")
    p.add_argument("--metrics", type=_str_list, default=["rmse", "acc"], help="comma-separated metric names")
    p.add_argument("--extreme-masks", help="mask container restricting scoring to extreme pixels")
    p.add_argument("--mask", choices=("none", "nan"), default="none", help="mask source without extreme masks")
    p.add_argument("--climatology", choices=("test", "train"), default="test", help="ACC anomaly reference")
    p.add_argument("--train-climatology", help="climatology container for --climatology train")
    p.add_argument("--leads", type=_int_list, default=[], help="restrict to these leads (hours)")
    p.add_argument("--training-range", type=_int_list, default=[6, 120], help="continuous: trained lead range")
    p.add_argument("--split", default="test", help="split label for the report")
    p.add_argument("--out", help="report JSON (maps embedded)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rollout", help="iterate a single-step model")
    _common(p)
    p.add_argument("--model", choices=("persistence", "linreg"), default="persistence", help="step model")
    p.add_argument("--model-file", help="CLLM file for linreg")
    p.add_argument("--input", help="container providing initial conditions")
    p.add_argument("--steps", type=int, default=4, help="number of steps")
    p.add_argument("--out-dir", help="directory for rollout_<lead>h.clbt")
    _sample_opts(p)
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("report", help="render an evaluation report")
    _common(p)
    p.add_argument("--input", help="report JSON from evaluate")
    p.add_argument("--format", choices=("json", "csv", "maps"), default="json", help="output format")
    p.add_argument("--out", help="output file (json, csv) or directory (maps)")
    p.set_defaults(func=cmd_report)
    return parser


def _parse(parser: argparse.ArgumentParser, argv):
    args = parser.parse_args(argv)
    if not args.command:
        raise UsageError("clbench: a subcommand is required (see --help)")
    if args.config:
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(subparser, read_config(args.config))
        args = parser.parse_args(argv)
    if args.threads is None:
        args.threads = harness.default_threads()
    elif args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    _echo_config(args)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ClbenchError, OSError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
