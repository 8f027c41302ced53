import numpy as np
import pytest

import oracles
from conftest import make_series
from clbench import baselines
from clbench.errors import BadMagicError, ChannelMismatchError, ChecksumError, ConfigurationError, EmptySplitError
from clbench.grid import grid_from_resolution, make_lat_weights
from clbench.metrics import lat_rmse
from clbench.regrid import regrid_bilinear
from clbench.sampler import SampleSet, forecasting_samples


def pairs(x, y, grid=None, in_names=None, out_names=None):
    N = x.shape[0]
    return SampleSet(
        inputs=x,
        targets=y,
        leads=np.full(N, 6),
        input_names=in_names or [f"v{c}@0h" for c in range(x.shape[1])],
        target_names=out_names or [f"v{c}" for c in range(y.shape[1])],
        times=np.arange(N) * 3600,
        input_grid=grid,
        target_grid=grid,
    )


# ---------------------------------------------------------------------------
# climatology / persistence


def test_climatology_constant_and_alternating():
    s = make_series(T=6, data=np.full((6, 1, 4, 8), 3.5, np.float32))
    np.testing.assert_array_equal(baselines.climatology_forecast(s).field, 3.5)
    alt = np.zeros((10, 1, 4, 8), np.float32)
    alt[1::2] = 2.0
    clim = baselines.climatology_forecast(make_series(T=10, data=alt))
    np.testing.assert_allclose(clim.field, 1.0)
    preds = baselines.predict_climatology(clim, 5)
    assert preds.shape == (5, 1, 4, 8)
    assert all(np.array_equal(preds[0], p) for p in preds)


def test_climatology_empty_split():
    s = make_series(T=4).isel(slice(0, 0))
    with pytest.raises(EmptySplitError):
        baselines.climatology_forecast(s)


def test_climatology_on_iid_noise_is_lead_invariant():
    train = make_series(T=400, res=22.5, seed=1)
    test = make_series(T=200, res=22.5, seed=2)
    w = make_lat_weights(train.grid).w
    clim = baselines.climatology_forecast(train)
    scores = []
    for lead in (6, 24, 72):
        ss = forecasting_samples(test, lead=lead)
        scores.append(lat_rmse(baselines.predict_climatology(clim, len(ss))[:, 0], ss.targets[:, 0], w))
    assert all(abs(s - 1.0) < 0.03 for s in scores)
    assert max(scores) / min(scores) < 1.02


def test_persistence_copies_offset_zero():
    s = make_series(T=12, names=("a", "b"), seed=3)
    ss = forecasting_samples(s, history_offsets_hours=(0, -6), lead=12)
    p = baselines.persistence_forecast(ss)
    np.testing.assert_array_equal(p[:, 0], ss.inputs[:, ss.input_names.index("a@0h")])
    np.testing.assert_array_equal(p[:, 1], ss.inputs[:, ss.input_names.index("b@0h")])
    with pytest.raises(ConfigurationError):
        baselines.persistence_forecast(ss, out_vars=["zzz"])


def test_persistence_lead_zero_is_exact():
    # A zero-lead pair has the target equal to the current state.
    s = make_series(T=10, seed=4)
    x = np.asarray(s.data, np.float64)
    ss = pairs(x, x.copy(), s.grid, in_names=["t2m@0h"], out_names=["t2m"])
    w = make_lat_weights(s.grid).w
    assert lat_rmse(baselines.persistence_forecast(ss)[:, 0], ss.targets[:, 0], w) == 0.0


def test_persistence_error_grows_with_lead_on_ar1(rng):
    rho, T = 0.9, 6000
    x = np.empty((T, 1, 2, 4))
    x[0] = rng.standard_normal((1, 2, 4))
    for t in range(1, T):
        x[t] = rho * x[t - 1] + np.sqrt(1 - rho**2) * rng.standard_normal((1, 2, 4))
    s = make_series(T=T, res=90.0, data=x.astype(np.float32))
    w = make_lat_weights(s.grid).w
    errs = []
    for k in (1, 2, 4, 8):
        ss = forecasting_samples(s, lead=6 * k)
        e = lat_rmse(baselines.persistence_forecast(ss)[:, 0], ss.targets[:, 0], w)
        assert e == pytest.approx(np.sqrt(2 * (1 - rho**k)), rel=0.05)
        errs.append(e)
    assert np.all(np.diff(errs) > 0)


# ---------------------------------------------------------------------------
# linear regression


def _grid():
    return grid_from_resolution(45.0)  # 4 x 8


def test_linreg_exact_recovery_k1(rng):
    g = _grid()
    x = rng.standard_normal((60, 2, 4, 8))
    a, b, c = rng.standard_normal((3, 4, 8))
    y = (a * x[:, 0] + b * x[:, 1] + c)[:, None]
    m = baselines.linreg_fit(pairs(x, y, g), k=1)
    assert m.info["normal_residual"] < 1e-8
    np.testing.assert_allclose(m.coef[:, :, 0, 0], a, atol=1e-8)
    np.testing.assert_allclose(m.coef[:, :, 1, 0], b, atol=1e-8)
    np.testing.assert_allclose(m.coef[:, :, 2, 0], c, atol=1e-8)
    np.testing.assert_allclose(baselines.linreg_predict(m, x), y, atol=1e-8)


def test_linreg_exact_recovery_stencil(rng):
    g = _grid()
    x = rng.standard_normal((80, 1, 4, 8))
    # Target = east neighbour minus west neighbour (periodic longitude).
    y = (np.roll(x, -1, axis=3) - np.roll(x, 1, axis=3))
    m = baselines.linreg_fit(pairs(x, y, g), k=3)
    np.testing.assert_allclose(baselines.linreg_predict(m, x), y, atol=1e-8)
    centre = m.coef[:, :, :9, 0]
    # Stencil order is row-major over (di, dj); (0, +1) is index 5, (0, -1) index 3.
    np.testing.assert_allclose(centre[..., 5], 1.0, atol=1e-8)
    np.testing.assert_allclose(centre[..., 3], -1.0, atol=1e-8)


def test_linreg_identity_task(rng):
    g = _grid()
    x = rng.standard_normal((50, 1, 4, 8))
    m = baselines.linreg_fit(pairs(x, x.copy(), g))
    xt = rng.standard_normal((10, 1, 4, 8))
    assert np.sqrt(np.mean((baselines.linreg_predict(m, xt) - xt) ** 2)) < 1e-6


def test_linreg_matches_pinv_oracle(rng):
    g = _grid()
    x = rng.standard_normal((40, 1, 4, 8))
    y = rng.standard_normal((40, 1, 4, 8))
    m = baselines.linreg_fit(pairs(x, y, g), k=3)
    i, j = 2, 7
    cols = [x[:, 0, i + di, (j + dj) % 8] for di in (-1, 0, 1) for dj in (-1, 0, 1)]
    X = np.column_stack(cols + [np.ones(40)])
    beta = np.linalg.pinv(X) @ y[:, 0, i, j]
    np.testing.assert_allclose(m.coef[i, j, :, 0], beta, atol=1e-6)


def test_linreg_k1_closed_form(rng):
    g = _grid()
    x = rng.standard_normal((30, 1, 4, 8))
    y = 0.3 * x + rng.standard_normal((30, 1, 4, 8))
    m = baselines.linreg_fit(pairs(x, y, g), k=1)
    for i, j in [(0, 0), (3, 4)]:
        xs, ys = x[:, 0, i, j], y[:, 0, i, j]
        slope = np.sum((xs - xs.mean()) * (ys - ys.mean())) / np.sum((xs - xs.mean()) ** 2)
        assert m.coef[i, j, 0, 0] == pytest.approx(slope, abs=1e-10)
        assert m.coef[i, j, 1, 0] == pytest.approx(ys.mean() - slope * xs.mean(), abs=1e-10)


def test_linreg_large_ridge_limit(rng):
    g = _grid()
    x = rng.standard_normal((30, 1, 4, 8))
    y = 2.0 * x + 1.5
    m = baselines.linreg_fit(pairs(x, y, g), k=3, ridge=1e12)
    assert np.abs(m.coef[:, :, :-1]).max() < 1e-6
    np.testing.assert_allclose(m.coef[:, :, -1, 0], y[:, 0].mean(axis=0), atol=1e-4)
    # Small ridge changes are small coefficient changes.
    a = baselines.linreg_fit(pairs(x, y, g), k=1, ridge=1.0).coef
    b = baselines.linreg_fit(pairs(x, y, g), k=1, ridge=1.0 + 1e-6).coef
    assert np.abs(a - b).max() < 1e-5


def test_linreg_singular_without_ridge(rng):
    g = _grid()
    x = np.repeat(rng.standard_normal((30, 1, 4, 8)), 2, axis=1)  # duplicated channel
    y = rng.standard_normal((30, 1, 4, 8))
    with pytest.raises(ConfigurationError):
        baselines.linreg_fit(pairs(x, y, g), k=1)
    baselines.linreg_fit(pairs(x, y, g), k=1, ridge=0.1)
    with pytest.raises(ConfigurationError):
        baselines.linreg_fit(pairs(x[:5], y[:5], g), k=3)


def test_linreg_global_matches_lstsq(rng):
    g = grid_from_resolution(90.0)  # 2 x 4
    x = rng.standard_normal((40, 1, 2, 4))
    y = rng.standard_normal((40, 1, 2, 4))
    m = baselines.linreg_fit(pairs(x, y, g), mode="global")
    assert m.info["normal_residual"] <= 1e-8
    X = np.column_stack([x.reshape(40, -1), np.ones(40)])
    ref = np.linalg.lstsq(X, y.reshape(40, -1), rcond=None)[0]
    np.testing.assert_allclose(m.coef, ref, atol=1e-6)
    np.testing.assert_allclose(baselines.linreg_predict(m, x), (X @ ref).reshape(y.shape), atol=1e-6)


def test_linreg_channel_and_shape_checks(rng):
    g = _grid()
    x = rng.standard_normal((20, 1, 4, 8))
    m = baselines.linreg_fit(pairs(x, x, g), k=1)
    with pytest.raises(ChannelMismatchError):
        baselines.linreg_predict(m, x, input_names=["other"])
    with pytest.raises(ConfigurationError):
        baselines.linreg_predict(m, x[:, :, :2])
    with pytest.raises(ConfigurationError):
        baselines.linreg_fit(pairs(x, x, g), k=2)


def test_model_round_trip(tmp_path, rng):
    g = _grid()
    x = rng.standard_normal((30, 1, 4, 8))
    m = baselines.linreg_fit(pairs(x, 0.5 * x, g), k=3, ridge=0.01)
    p = tmp_path / "m.cllm"
    baselines.save_model(m, p)
    back = baselines.load_model(p)
    assert back.input_names == m.input_names and back.k == 3 and back.ridge == 0.01
    np.testing.assert_array_equal(back.coef, m.coef)
    raw = bytearray(p.read_bytes())
    raw[-10] ^= 0xFF
    (tmp_path / "bad.cllm").write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        baselines.load_model(tmp_path / "bad.cllm")
    (tmp_path / "junk.cllm").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(BadMagicError):
        baselines.load_model(tmp_path / "junk.cllm")


# ---------------------------------------------------------------------------
# interpolation


def test_interp_downscale(rng):
    lo, hi = grid_from_resolution(45.0), grid_from_resolution(22.5)
    x = rng.standard_normal((3, 1, 4, 8))
    np.testing.assert_allclose(baselines.interp_downscale(x, lo, lo, "nearest"), x)
    np.testing.assert_allclose(baselines.interp_downscale(x, lo, lo, "bilinear"), x, atol=1e-12)
    np.testing.assert_allclose(baselines.interp_downscale(np.full((4, 8), 2.0), lo, hi), 2.0)
    np.testing.assert_array_equal(baselines.interp_downscale(x, lo, hi), regrid_bilinear(x, lo, hi))
    with pytest.raises(ConfigurationError):
        baselines.interp_downscale(x, lo, hi, "cubic")
