import numpy as np
import pytest
from scipy.stats import chisquare

from clbench.errors import ChannelMismatchError, ConfigurationError, EmptySampleSetError, InsufficientHistoryError
from clbench.grid import grid_from_resolution
from clbench.sampler import (
    LEAD_CHANNEL,
    LeadTime,
    continuous_samples,
    downscaling_pairs,
    draw_leads,
    forecasting_samples,
    parse_channel,
    projection_samples,
)
from clbench.store import FieldSeries, Variable
from conftest import HOUR, make_series


def test_benchmark_channel_count():
    names = [f"v{k}" for k in range(46)] + ["lsm", "orog", "lat2d"]
    s = make_series(T=5, names=names, res=90.0, static=("lsm", "orog", "lat2d"))
    ss = forecasting_samples(s, (0, -6, -12), 6)
    assert len(ss.input_names) == 141
    assert ss.input_names[:3] == ["v0@0h", "v0@-6h", "v0@-12h"]
    assert ss.input_names[-3:] == ["lsm", "orog", "lat2d"]
    assert ss.target_names == names[:46]


def test_three_step_series_gives_two_samples():
    ss = forecasting_samples(make_series(T=3), (0,), 6)
    assert len(ss) == 2
    np.testing.assert_array_equal(ss.targets[0, 0], make_series(T=3).data[1, 0])


def _brute_force(series, offsets, lead_h, in_vars, out_vars):
    step = series.step_hours
    samples = []
    for a in range(series.T):
        idx = [a + int(o / step) for o in offsets]
        tgt = a + int(lead_h / step)
        if min(idx) < 0 or tgt >= series.T:
            continue
        chans = []
        names = []
        for v in in_vars:
            var = series.variables[series.index(v)]
            if var.static:
                continue
            for o, i in zip(offsets, idx):
                chans.append(series.data[i, series.index(v)])
                names.append(f"{v}@{int(o)}h")
        for v in in_vars:
            if series.variables[series.index(v)].static:
                chans.append(series.data[a, series.index(v)])
                names.append(v)
        samples.append((series.times[a], np.stack(chans), np.stack([series.data[tgt, series.index(v)] for v in out_vars]), names))
    return samples


@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force_enumerator(seed):
    rng = np.random.default_rng(seed)
    names = ["a", "b", "c", "lsm"]
    s = make_series(T=int(rng.integers(6, 15)), names=names, res=90.0, static=("lsm",), seed=seed)
    offsets = [0] + sorted((-6 * rng.choice(np.arange(1, 4), size=int(rng.integers(0, 3)), replace=False)).tolist(), reverse=True)
    lead = int(6 * rng.integers(1, 4))
    in_vars = list(rng.permutation(names))
    out_vars = ["b", "a"]
    ss = forecasting_samples(s, offsets, lead, in_vars, out_vars)
    brute = _brute_force(s, offsets, lead, in_vars, out_vars)
    assert len(ss) == len(brute)
    for k, (t, x, y, cn) in enumerate(brute):
        assert ss.times[k] == t and ss.input_names == cn
        np.testing.assert_array_equal(ss.inputs[k], x)
        np.testing.assert_array_equal(ss.targets[k], y)


def test_storage_order_does_not_matter():
    s = make_series(T=6, names=("a", "b"), res=90.0)
    swapped = s.select(["b", "a"])
    x = forecasting_samples(s, (0, -6), 6, ["a", "b"], ["a"])
    y = forecasting_samples(swapped, (0, -6), 6, ["a", "b"], ["a"])
    np.testing.assert_array_equal(x.inputs, y.inputs)


def test_errors():
    s = make_series(T=3)
    with pytest.raises(ChannelMismatchError):
        forecasting_samples(s, (0,), 6, out_vars=["z500"])
    with pytest.raises(EmptySampleSetError):
        forecasting_samples(s, (0, -6, -12), 6)
    with pytest.raises(ConfigurationError):
        forecasting_samples(s, (-6, 0), 6)
    with pytest.raises(ConfigurationError):
        LeadTime(0)
    with pytest.raises(ConfigurationError):
        LeadTime(9).steps(6)


def test_context_supplies_history_without_leaking_targets():
    full = make_series(T=10)
    val, test = full.isel(slice(0, 5)), full.isel(slice(5, 10))
    strict = forecasting_samples(test, (0, -6), 6)
    ctx = forecasting_samples(test, (0, -6), 6, context=val)
    assert len(strict) == 3 and len(ctx) == 4
    assert ctx.times[0] == test.times[0]
    assert np.all(ctx.times + 6 * HOUR <= test.times[-1])


@pytest.mark.parametrize("lead,value", [(72, 0.72), (6, 0.06)])
def test_continuous_fixed_lead_channel(lead, value):
    s = make_series(T=20)
    ss = continuous_samples(s, (6, 120), fixed_lead_hours=lead)
    assert ss.input_names[-1] == LEAD_CHANNEL
    assert np.all(ss.inputs[:, -1] == np.float32(value))


def test_continuous_lead_draws_uniform():
    leads = draw_leads(200_000, 6, 120, 6, np.random.default_rng(0))
    values, counts = np.unique(leads, return_counts=True)
    assert values.tolist() == list(range(6, 121, 6)) and len(values) == 20
    assert chisquare(counts).pvalue > 0.01


def test_continuous_degenerate_range_equals_forecasting():
    s = make_series(T=12, names=("a", "b"), res=90.0)
    f = forecasting_samples(s, (0, -6), 12)
    c = continuous_samples(s, (12, 12), rng_seed=5, history_offsets_hours=(0, -6))
    np.testing.assert_array_equal(c.inputs[:, :-1], f.inputs)
    np.testing.assert_array_equal(c.targets, f.targets)
    assert np.all(c.inputs[:, -1] == np.float32(0.12))


def test_continuous_empty_range():
    with pytest.raises(ConfigurationError):
        continuous_samples(make_series(T=30), (1, 5))


def test_downscaling_pairs():
    s = make_series(T=4)
    ss = downscaling_pairs(s, s)
    np.testing.assert_array_equal(ss.inputs, ss.targets)
    low = make_series(T=6)
    g_hi = grid_from_resolution(45.0)
    high = FieldSeries(g_hi, [Variable("t2m")], low.times[3:], np.ones((3, 1) + g_hi.shape, np.float32))
    pairs = downscaling_pairs(low, high)
    assert len(pairs) == len(set(low.times) & set(high.times)) == 3
    with pytest.raises(EmptySampleSetError):
        downscaling_pairs(low.isel(slice(0, 2)), high)


def test_downscaling_padding_geometry():
    from clbench.grid import Grid

    lo = FieldSeries(Grid(np.arange(9.0), np.arange(21.0)), [Variable("t")], [0, 3600], np.ones((2, 1, 9, 21)))
    ss = downscaling_pairs(lo, lo, pad=(32, 64))
    assert ss.targets.shape == (2, 1, 32, 64) and ss.target_mask.sum() == 189
    assert np.all(ss.targets[:, :, ~ss.target_mask] == 0)


def _annual(names, years, seed=0):
    g = grid_from_resolution(90.0)
    step = 365 * 86400
    times = np.arange(years) * step
    data = np.random.default_rng(seed).standard_normal((years, len(names)) + g.shape).astype(np.float32)
    return FieldSeries(g, [Variable(n) for n in names], times, data, time_step_seconds=step)


def test_projection_stacks():
    forcings = _annual(["co2", "ch4", "so2", "bc"], 15)
    targets = _annual(["tas", "dtr", "pr", "pr90"], 15, seed=1)
    ss = projection_samples(forcings, targets)
    assert ss.inputs.shape[1] == 40 and len(ss) == 15 - 9
    assert ss.input_names[:4] == ["co2@y-9", "ch4@y-9", "so2@y-9", "bc@y-9"]
    assert ss.input_names[-1] == "bc@y-0"
    assert ss.times[0] == targets.times[9]
    np.testing.assert_array_equal(ss.inputs[0, 4 * 9 + 1], forcings.data[9, 1])
    np.testing.assert_array_equal(ss.targets[0], targets.data[9])
    with pytest.raises(InsufficientHistoryError):
        projection_samples(_annual(["co2"], 5), _annual(["tas"], 5))


def test_parse_channel():
    assert parse_channel("t2m@-6h") == ("t2m", -6)
    assert parse_channel("lsm") == ("lsm", None)
    assert parse_channel("co2@y-9") == ("co2@y-9", None)
