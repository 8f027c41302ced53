"""Deterministic, probabilistic, downscaling and projection metrics.

Array conventions: single-variable fields are ``N x H x W`` (a lone
``H x W`` field counts as N = 1); ensembles are ``M x N x H x W`` with the
member axis first.  Masks are boolean, ``True`` marking pixels that count,
shaped ``H x W`` or ``N x H x W``.  Latitude-weighted reductions renormalize
the weights over the unmasked pixels of each timestep, which reduces to the
plain ``1/(H W)`` normalization when nothing is masked.

Metrics that are mathematically undefined for their inputs raise
:class:`~clbench.errors.UndefinedMetricError` rather than returning NaN.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from clbench import kernels
from clbench.errors import ConfigurationError, UndefinedMetricError
from clbench.grid import LatWeights

_INV_SQRT_PI = 1.0 / math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class ClimatologyMap:
    """Per-pixel temporal mean; ``source`` records which split produced it."""

    field: np.ndarray
    source: str = "test"


@dataclass(frozen=True, eq=False)
class GaussianForecast:
    mu: np.ndarray
    sigma: np.ndarray


@dataclass(frozen=True, eq=False)
class EnsembleForecast:
    members: np.ndarray

    @property
    def M(self) -> int:
        return int(np.asarray(self.members).shape[0])


def _fields(*arrays):
    out = []
    shape = None
    for a in arrays:
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 2:
            a = a[None]
        if a.ndim != 3:
            raise ConfigurationError(f"expected N x H x W fields, got shape {a.shape}")
        if shape is not None and a.shape != shape:
            raise ConfigurationError(f"shape mismatch: {a.shape} vs {shape}")
        shape = a.shape
        out.append(a)
    return out


def _mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape == shape[1:]:
        return np.broadcast_to(m, shape)
    if m.shape != shape:
        raise ConfigurationError(f"mask shape {m.shape} matches neither {shape[1:]} nor {shape}")
    return m


def _weights(weights, H: int) -> np.ndarray:
    w = np.asarray(weights.w if isinstance(weights, LatWeights) else weights, dtype=np.float64).reshape(-1)
    if w.size != H:
        raise ConfigurationError(f"{w.size} latitude weights for {H} rows")
    return w


def _finite(value: float, name: str) -> float:
    if not math.isfinite(value):
        raise UndefinedMetricError(f"{name} is not finite (NaN in unmasked pixels?)")
    return float(value)


def _step_means(values: np.ndarray, w: np.ndarray, m: np.ndarray):
    num, den = kernels.weighted_step_sums(values, w, np.ascontiguousarray(m, dtype=np.uint8))
    defined = den > 0
    means = np.full(num.shape, np.nan)
    means[defined] = num[defined] / den[defined]
    return means, defined


# ---------------------------------------------------------------------------
# deterministic


def lat_rmse(pred, truth, weights, mask=None, *, return_steps: bool = False):
    """Latitude-weighted RMSE: per-timestep weighted spatial RMS, averaged over N.

    Timesteps whose pixels are all masked are undefined and excluded from
    the average; ``return_steps=True`` additionally returns the per-step
    values and their ``defined`` flags.
    """
    p, t = _fields(pred, truth)
    w = _weights(weights, p.shape[1])
    m = _mask(mask, p.shape)
    steps, defined = _step_means((p - t) ** 2, w, m)
    steps = np.sqrt(steps)
    if not defined.any():
        raise UndefinedMetricError("lat_rmse: every timestep is fully masked")
    value = _finite(float(np.mean(steps[defined])), "lat_rmse")
    if return_steps:
        return value, steps, defined
    return value


def acc(pred, truth, clim, weights, mask=None) -> float:
    """Latitude-weighted anomaly correlation over all (k, i, j) jointly.

    ``clim=None`` uses the temporal mean of the (unmasked) truth, i.e. the
    test-set climatology.
    """
    p, t = _fields(pred, truth)
    w = _weights(weights, p.shape[1])
    m = _mask(mask, p.shape)
    if clim is None:
        clim = truth_climatology(t, m)
    c = np.asarray(clim.field if isinstance(clim, ClimatologyMap) else clim, dtype=np.float64)
    a = p - c
    b = t - c
    u8 = np.ascontiguousarray(m, dtype=np.uint8)
    num = kernels.weighted_step_sums(a * b, w, u8)[0].sum()
    da = kernels.weighted_step_sums(a * a, w, u8)[0].sum()
    db = kernels.weighted_step_sums(b * b, w, u8)[0].sum()
    if not (da > 0 and db > 0):
        raise UndefinedMetricError("acc: zero anomaly variance")
    value = _finite(num / math.sqrt(da * db), "acc")
    return float(np.clip(value, -1.0, 1.0))


def truth_climatology(truth, mask=None) -> ClimatologyMap:
    """Per-pixel temporal mean of unmasked truth; never-valid pixels get 0."""
    (t,) = _fields(truth)
    m = _mask(mask, t.shape)
    count = m.sum(axis=0)
    total = np.where(m, t, 0.0).sum(axis=0)
    field_ = np.zeros(count.shape)
    np.divide(total, count, out=field_, where=count > 0)
    return ClimatologyMap(field_, "test")


def mean_bias(pred, truth, mask=None) -> float:
    """Unweighted mean(pred) - mean(truth) over unmasked (k, i, j)."""
    p, t = _fields(pred, truth)
    m = _mask(mask, p.shape)
    n = int(m.sum())
    if n == 0:
        raise UndefinedMetricError("mean_bias: no unmasked pixels")
    return _finite(p[m].sum() / n - t[m].sum() / n, "mean_bias")


def per_pixel_mean_bias(preds, truths, mask=None) -> np.ndarray:
    """Time mean of ``pred - truth`` per pixel; never-valid pixels are NaN."""
    p, t = _fields(preds, truths)
    m = _mask(mask, p.shape)
    count = m.sum(axis=0)
    total = np.where(m, p - t, 0.0).sum(axis=0)
    out = np.full(count.shape, np.nan)
    np.divide(total, count, out=out, where=count > 0)
    return out


def pearson(pred, truth, mask=None) -> float:
    """Pearson correlation of the flattened unmasked values."""
    p, t = _fields(pred, truth)
    m = _mask(mask, p.shape)
    x = p[m]
    y = t[m]
    if x.size < 2:
        raise UndefinedMetricError("pearson: fewer than two unmasked values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if not (sxx > 0 and syy > 0):
        raise UndefinedMetricError("pearson: zero variance")
    value = _finite(float(np.dot(dx, dy)) / math.sqrt(sxx * syy), "pearson")
    return float(np.clip(value, -1.0, 1.0))


# ---------------------------------------------------------------------------
# probabilistic


def _members(ens) -> np.ndarray:
    e = np.asarray(ens.members if isinstance(ens, EnsembleForecast) else ens, dtype=np.float64)
    if e.ndim == 3:
        e = e[:, None]
    if e.ndim != 4:
        raise ConfigurationError(f"expected M x N x H x W ensemble, got shape {e.shape}")
    return e


def spread(ens, weights, mask=None, *, ddof: int = 1) -> float:
    """Mean over N of the square-rooted weighted spatial mean of member variance.

    ``ddof=1`` (divisor M-1) is the default; ``ddof=0`` gives the population
    variance.
    """
    e = _members(ens)
    M = e.shape[0]
    if M < 2:
        raise ConfigurationError(f"spread needs at least 2 members, got {M}")
    var = e.var(axis=0, ddof=ddof)
    w = _weights(weights, var.shape[1])
    m = _mask(mask, var.shape)
    steps, defined = _step_means(var, w, m)
    if not defined.any():
        raise UndefinedMetricError("spread: every timestep is fully masked")
    return _finite(float(np.mean(np.sqrt(steps[defined]))), "spread")


def spread_from_sigma(sigma, weights, mask=None) -> float:
    """Spread of a parametric forecast, using sigma**2 as the per-pixel variance."""
    (s,) = _fields(sigma)
    w = _weights(weights, s.shape[1])
    m = _mask(mask, s.shape)
    steps, defined = _step_means(s * s, w, m)
    if not defined.any():
        raise UndefinedMetricError("spread: every timestep is fully masked")
    return _finite(float(np.mean(np.sqrt(steps[defined]))), "spread")


def spread_skill_ratio(ens, truth, weights, mask=None, *, ddof: int = 1) -> float:
    """Spread divided by the latitude-weighted RMSE of the ensemble mean."""
    e = _members(ens)
    s = spread(e, weights, mask, ddof=ddof)
    skill = lat_rmse(e.mean(axis=0), truth, weights, mask)
    if skill == 0:
        raise UndefinedMetricError("spread_skill_ratio: ensemble mean RMSE is zero")
    return s / skill


def crps_gaussian_pointwise(mu, sigma, x) -> np.ndarray:
    """Closed-form CRPS of N(mu, sigma^2) against observation ``x``."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    z = (x - mu) / sigma
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return sigma * (z * (2.0 * ndtr(z) - 1.0) + 2.0 * pdf - _INV_SQRT_PI)


def crps_gaussian(mu, sigma, truth, mask=None, weights=None) -> float:
    """Mean Gaussian CRPS over unmasked pixels.

    The default aggregate is an unweighted mean; pass ``weights`` for the
    latitude-weighted variant.
    """
    mu_, sg, t = _fields(mu, sigma, truth)
    m = _mask(mask, t.shape)
    if np.any(sg[m] <= 0) or np.any(np.isnan(sg[m])):
        raise ConfigurationError("crps_gaussian: sigma must be > 0 at every unmasked pixel")
    if not m.any():
        raise UndefinedMetricError("crps_gaussian: no unmasked pixels")
    safe_sigma = np.where(m, sg, 1.0)
    c = crps_gaussian_pointwise(mu_, safe_sigma, t)
    if weights is None:
        return _finite(float(c[m].sum() / m.sum()), "crps")
    w = _weights(weights, t.shape[1])
    wm = np.where(m, w[None, :, None], 0.0)
    return _finite(float(np.where(m, wm * c, 0.0).sum() / wm.sum()), "crps")


def crps_ensemble_gaussian(ens, truth, mask=None, weights=None, *, ddof: int = 1) -> float:
    """Gaussian CRPS using per-pixel ensemble mean and std as (mu, sigma).

    Pixels with zero ensemble spread use the deterministic limit ``|x - mu|``.
    """
    e = _members(ens)
    (t,) = _fields(truth)
    if e.shape[0] < 2:
        raise ConfigurationError("Gaussian CRPS needs an ensemble of at least 2 members")
    mu = e.mean(axis=0)
    sd = e.std(axis=0, ddof=ddof)
    m = _mask(mask, t.shape)
    if not m.any():
        raise UndefinedMetricError("crps: no unmasked pixels")
    degenerate = sd <= 0
    c = np.where(degenerate, np.abs(t - mu), crps_gaussian_pointwise(mu, np.where(degenerate, 1.0, sd), t))
    if weights is None:
        return _finite(float(c[m].sum() / m.sum()), "crps")
    w = _weights(weights, t.shape[1])
    wm = np.where(m, w[None, :, None], 0.0)
    return _finite(float(np.where(m, wm * c, 0.0).sum() / wm.sum()), "crps")


def rank_histogram(ens, truth, mask=None, rng_seed: int = 0) -> np.ndarray:
    """Counts of the truth's rank among the members (M + 1 bins).

    Ties are broken uniformly at random from ``rng_seed``; pixels with any
    NaN member or NaN truth are skipped.
    """
    e = _members(ens)
    (t,) = _fields(truth)
    if e.shape[1:] != t.shape:
        raise ConfigurationError(f"ensemble shape {e.shape[1:]} does not match truth {t.shape}")
    M = e.shape[0]
    m = _mask(mask, t.shape) & np.isfinite(t) & np.all(np.isfinite(e), axis=0)
    members = e[:, m]
    x = t[m]
    u = np.random.default_rng(rng_seed).random(x.size)
    if M < 1:
        raise ConfigurationError("rank histogram needs at least one member")
    return kernels.rank_counts(members, x, u)


# ---------------------------------------------------------------------------
# projection


def _global_means(a: np.ndarray, w: np.ndarray, m: np.ndarray) -> np.ndarray:
    means, defined = _step_means(a, w, m)
    if not defined.all():
        raise UndefinedMetricError("global mean over a fully masked field")
    return means


def _projection_terms(pred, truth, weights, mask):
    p, t = _fields(pred, truth)
    w = _weights(weights, p.shape[1])
    if mask is not None and np.asarray(mask).shape != p.shape[1:]:
        raise ConfigurationError("projection metrics take a static H x W mask")
    m2 = np.ones(p.shape[1:], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    m = np.broadcast_to(m2, p.shape)
    gp = _global_means(p, w, m)
    gt = _global_means(t, w, m)
    denom = float(np.mean(gt))
    if denom == 0 or not math.isfinite(denom):
        raise UndefinedMetricError("normalizer (mean global truth) is zero")
    return p, t, w, m2, gp, gt, denom


def nrmse_s(pred, truth, weights, mask=None) -> float:
    """Weighted RMS of the difference of temporal means, over the mean global truth."""
    p, t, w, m2, _, _, denom = _projection_terms(pred, truth, weights, mask)
    d2 = (p.mean(axis=0) - t.mean(axis=0)) ** 2
    num = _global_means(d2[None], w, m2[None])[0]
    return _finite(math.sqrt(num) / denom, "nrmse_s")


def nrmse_g(pred, truth, weights, mask=None) -> float:
    """RMS over time of the global-mean difference, over the mean global truth."""
    _, _, _, _, gp, gt, denom = _projection_terms(pred, truth, weights, mask)
    return _finite(math.sqrt(float(np.mean((gp - gt) ** 2))) / denom, "nrmse_g")


def total(pred, truth, weights, mask=None, alpha: float = 5.0) -> float:
    return nrmse_s(pred, truth, weights, mask) + alpha * nrmse_g(pred, truth, weights, mask)


# ---------------------------------------------------------------------------
# masking


def apply_nan_mask(truth, pred):
    """Zero the truth's NaNs and blank the prediction there.

    Returns ``(truth, pred, mask)`` with ``mask`` True where the truth was
    finite.
    """
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    if t.shape != p.shape:
        raise ConfigurationError(f"shape mismatch: {t.shape} vs {p.shape}")
    mask = ~np.isnan(t)
    return np.where(mask, t, 0.0), np.where(mask, p, 0.0), mask


DETERMINISTIC_METRICS = ("rmse", "acc", "mean_bias", "pearson", "nrmse_s", "nrmse_g", "total")


def deterministic(name: str, pred, truth, weights, mask=None, clim=None) -> float:
    """Dispatch a deterministic metric by its report name."""
    if name == "rmse":
        return lat_rmse(pred, truth, weights, mask)
    if name == "acc":
        return acc(pred, truth, clim, weights, mask)
    if name == "mean_bias":
        return mean_bias(pred, truth, mask)
    if name == "pearson":
        return pearson(pred, truth, mask)
    if name == "nrmse_s":
        return nrmse_s(pred, truth, weights, mask)
    if name == "nrmse_g":
        return nrmse_g(pred, truth, weights, mask)
    if name == "total":
        return total(pred, truth, weights, mask)
    raise ConfigurationError(f"unknown metric {name!r}; choose from {DETERMINISTIC_METRICS}")
