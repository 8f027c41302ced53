import json

import numpy as np
import pytest

import oracles
from conftest import make_series
from clbench import baselines, harness
from clbench.errors import AlignmentError, ConfigurationError, RolloutIncompatibleError
from clbench.grid import make_lat_weights
from clbench.metrics import EnsembleForecast, GaussianForecast
from clbench.report import MetricReport
from clbench.sampler import SampleSet, forecasting_samples
from clbench.store import read_container

METRICS = ("rmse", "acc", "mean_bias", "pearson")


@pytest.fixture
def truth():
    return forecasting_samples(make_series(T=30, names=("t2m", "z500"), seed=5), lead=6)


def test_perfect_predictions(truth):
    preds = harness.PredictionSet.for_samples(truth.targets.copy(), truth)
    rep = harness.evaluate_direct(preds, truth, harness.EvalConfig(metrics=METRICS, threads=1))
    assert len(rep) == 2 * len(METRICS)
    for var in truth.target_names:
        assert rep.value("rmse", var) == 0.0
        assert rep.value("acc", var) == pytest.approx(1.0, abs=1e-12)
        assert rep.value("mean_bias", var) == 0.0


def test_direct_matches_oracle(truth, rng):
    p = truth.targets + 0.3 * rng.standard_normal(truth.targets.shape)
    preds = harness.PredictionSet.for_samples(p, truth)
    rep = harness.evaluate_direct(preds, truth, harness.EvalConfig(metrics=("rmse", "acc")))
    w = make_lat_weights(truth.target_grid).w
    t = truth.targets[:, 0].astype(np.float64)
    assert rep.value("rmse", "t2m") == pytest.approx(oracles.lat_rmse(p[:, 0], t, w), rel=1e-12)
    clim = oracles.truth_climatology(t)
    assert rep.value("acc", "t2m") == pytest.approx(oracles.acc(p[:, 0], t, clim, w), rel=1e-10)


def test_alignment_is_checked(truth):
    preds = harness.PredictionSet.for_samples(truth.targets.copy(), truth)
    preds.leads[:] = 12
    with pytest.raises(AlignmentError):
        harness.evaluate_direct(preds, truth, harness.EvalConfig())
    short = harness.PredictionSet(truth.targets[:-1], truth.target_names, truth.times[:-1], 6)
    with pytest.raises(AlignmentError):
        harness.evaluate_direct(short, truth, harness.EvalConfig())


def test_eval_config_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        harness.EvalConfig(metrics=())
    with pytest.raises(ConfigurationError):
        harness.EvalConfig(metrics=("bogus",))
    with pytest.raises(ConfigurationError):
        harness.EvalConfig(mask_source="extreme")
    with pytest.raises(ConfigurationError):
        harness.EvalConfig(climatology="train")


def test_all_true_mask_equals_unmasked(truth, rng):
    p = truth.targets + rng.standard_normal(truth.targets.shape)
    preds = harness.PredictionSet.for_samples(p, truth)
    plain = harness.evaluate_direct(preds, truth, harness.EvalConfig(metrics=("rmse",)))
    masked = SampleSet(**{**truth.__dict__, "target_mask": np.ones(truth.targets.shape[2:], bool)})
    rep = harness.evaluate_direct(preds, masked, harness.EvalConfig(metrics=("rmse",)))
    assert rep.value("rmse", "t2m") == plain.value("rmse", "t2m")


def test_determinism(truth, rng):
    p = truth.targets + rng.standard_normal(truth.targets.shape)
    preds = harness.PredictionSet.for_samples(p, truth)
    a = harness.evaluate_direct(preds, truth, harness.EvalConfig(metrics=METRICS, threads=4)).to_json(True)
    b = harness.evaluate_direct(preds, truth, harness.EvalConfig(metrics=METRICS, threads=1)).to_json(True)
    assert a == b


def test_continuous_protocol(rng):
    s = make_series(T=60, seed=6)
    leads = [6, 24, 240]
    truths = {L: forecasting_samples(s, lead=L) for L in leads}
    preds = {L: harness.PredictionSet.for_samples(t.targets + rng.standard_normal(t.targets.shape), t) for L, t in truths.items()}
    cfg = harness.EvalConfig(metrics=("rmse", "acc", "mean_bias"))
    rep = harness.evaluate_continuous(preds, truths, cfg, training_range_hours=(6, 120))
    assert len(rep) == len(leads) * 1 * 3
    for r in rep.records:
        assert r.tags["protocol"] == "continuous"
        assert r.tags["extrapolated"] == (r.lead_hours == 240)
    single = harness.evaluate_continuous({24: preds[24]}, {24: truths[24]}, cfg)
    direct = harness.evaluate_direct(preds[24], truths[24], cfg)
    assert [r.value for r in single.records] == [r.value for r in direct.records]
    with pytest.raises(ConfigurationError):
        harness.evaluate_continuous(preds, truths, harness.EvalConfig(leads=[48]))


# ---------------------------------------------------------------------------
# rollout


def test_rollout_identity_and_persistence():
    s = make_series(T=40, names=("a", "orog"), static=("orog",), seed=7)
    ss = forecasting_samples(s, history_offsets_hours=(0, -6), lead=6, out_vars=["a"])
    names = ss.input_names
    step = harness.persistence_step(names, ["a"])
    traj = harness.rollout(step, ss.inputs, names, ["a"], n_steps=5)
    for k in range(5):
        np.testing.assert_array_equal(traj.predictions[k], ss.inputs[:, [names.index("a@0h")]])
    # Rolled-out persistence equals one-shot persistence at every lead.
    for lead in (6, 18, 30):
        one = baselines.persistence_forecast(forecasting_samples(s, history_offsets_hours=(0, -6), lead=lead, out_vars=["a"]))
        np.testing.assert_array_equal(traj.at_lead(lead)[: one.shape[0]], one)
    with pytest.raises(KeyError):
        traj.at_lead(7)


def test_rollout_matrix_power(rng):
    s = make_series(T=10, names=("u", "v"), seed=8)
    ss = forecasting_samples(s, lead=6)
    A = 0.5 * rng.standard_normal((2, 2))
    step = lambda x: np.einsum("ij,njhw->nihw", A, x)
    traj = harness.rollout(step, ss.inputs, ss.input_names, ["u", "v"], n_steps=6)
    expect = np.einsum("ij,njhw->nihw", np.linalg.matrix_power(A, 6), ss.inputs)
    np.testing.assert_allclose(traj.at_lead(36), expect, atol=1e-5)


def test_rollout_history_shift():
    s = make_series(T=10, seed=9)
    ss = forecasting_samples(s, history_offsets_hours=(0, -6), lead=6)
    seen = []

    def step(x):
        seen.append(x.copy())
        return x[:, :1] + 1.0

    harness.rollout(step, ss.inputs, ss.input_names, ["t2m"], n_steps=3)
    # Second step's lagged channel is the first step's current state.
    np.testing.assert_array_equal(seen[1][:, 1], seen[0][:, 0])
    np.testing.assert_array_equal(seen[2][:, 1], seen[0][:, 0] + 1.0)


def test_rollout_incompatible_outputs():
    s = make_series(T=10, names=("a", "b"), seed=10)
    ss = forecasting_samples(s, lead=6)
    with pytest.raises(RolloutIncompatibleError):
        harness.rollout(lambda x: x[:, :1], ss.inputs, ss.input_names, ["a"], n_steps=2)


# ---------------------------------------------------------------------------
# probabilistic


def test_probabilistic_identical_members(truth):
    ens = EnsembleForecast(np.repeat(truth.targets[None], 4, axis=0))
    rep = harness.evaluate_probabilistic(ens, truth)
    assert rep.value("spread", "t2m") == 0.0
    assert rep.value("crps", "t2m") == pytest.approx(0.0, abs=1e-12)
    assert not rep.get("spread_skill", "t2m").defined
    with pytest.raises(ConfigurationError):
        harness.evaluate_probabilistic(EnsembleForecast(truth.targets[None]), truth)


def test_probabilistic_gaussian_crps(truth):
    g = GaussianForecast(truth.targets.copy(), np.ones_like(truth.targets))
    rep = harness.evaluate_probabilistic(g, truth)
    assert rep.value("crps", "z500") == pytest.approx(0.233695, abs=1e-4)
    assert rep.value("spread", "t2m") == pytest.approx(1.0)


def test_probabilistic_calibrated_ensemble(rng):
    s = make_series(T=400, res=22.5, seed=11)
    ss = forecasting_samples(s, lead=6)
    t = ss.targets.astype(np.float64)
    centre = t + rng.standard_normal(t.shape)
    members = centre[None] + rng.standard_normal((10,) + t.shape)
    rep = harness.evaluate_probabilistic(EnsembleForecast(members), ss)
    assert rep.value("spread_skill", "t2m") == pytest.approx(1.0, rel=0.05)
    counts = rep.histograms["rank_histogram/t2m/6h"]
    assert counts.size == 11
    expected = counts.sum() / 11
    assert np.all(np.abs(counts - expected) < 0.05 * expected)


# ---------------------------------------------------------------------------
# reports


def test_emit_report_formats(tmp_path, truth, rng):
    with pytest.raises(ConfigurationError):
        harness.emit_report(MetricReport(), "json", tmp_path / "r.json")
    p = truth.targets + rng.standard_normal(truth.targets.shape)
    rep = harness.evaluate_direct(harness.PredictionSet.for_samples(p, truth), truth, harness.EvalConfig(metrics=METRICS))
    harness.emit_report(rep, "json", tmp_path / "r.json")
    back = MetricReport.from_json((tmp_path / "r.json").read_text())
    assert [(r.key(), r.value) for r in back.records] == [(r.key(), r.value) for r in rep.records]
    harness.emit_report(rep, "csv", tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().count("\n") == len(rep) + 1
    files = harness.emit_report(rep, "maps", tmp_path / "maps")
    pgm = [f for f in files if f.suffix == ".pgm"]
    assert len(pgm) == 2
    assert pgm[0].read_bytes().startswith(b"P5\n8 4\n255\n")
    side = json.loads(pgm[0].with_suffix(".pgm.json").read_text())
    assert side["min"] <= side["max"]
    clbt = read_container(next(f for f in files if f.suffix == ".clbt"))
    key = clbt.attrs["key"]
    np.testing.assert_allclose(clbt.data[0, 0], rep.maps[key], rtol=1e-6)


def test_mean_bias_map_sign_follows_drift(rng):
    base = rng.standard_normal((40, 1, 4, 8))
    drift = np.where(rng.random((4, 8)) > 0.5, 0.2, -0.2)
    data = base * 0.01 + drift * np.arange(40)[:, None, None, None]
    s = make_series(T=40, data=data.astype(np.float32))
    ss = forecasting_samples(s, lead=24)
    preds = harness.PredictionSet.for_samples(baselines.persistence_forecast(ss), ss)
    rep = harness.evaluate_direct(preds, ss, harness.EvalConfig(metrics=("mean_bias",)))
    bias = rep.maps["mean_bias/t2m/24h"]
    # Persistence lags the trend: bias = pred - truth has the opposite sign of the drift.
    assert np.array_equal(np.sign(bias), -np.sign(drift))


def test_prediction_container_round_trip(tmp_path, truth):
    preds = harness.PredictionSet.for_samples(truth.targets.copy(), truth, source="unit")
    harness.write_predictions(preds, tmp_path / "p.clbt", model_tag="unit")
    back = harness.read_predictions(tmp_path / "p.clbt")
    harness.check_alignment(back, truth)
    assert back.attrs["protocol"] == "direct" and back.source == "unit"
