"""Traditional baselines: climatology, persistence, linear regression and
interpolation downscaling."""
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
    EmptySplitError,
    HeaderParseError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from clbench.grid import Grid, make_lat_weights
from clbench.metrics import ClimatologyMap
from clbench.regrid import regrid_bilinear, regrid_nearest
from clbench.sampler import SampleSet, channel_name
from clbench.store import FieldSeries

MODEL_MAGIC = b"CLLM"
MODEL_VERSION = 1


# ---------------------------------------------------------------------------
# climatology / persistence


def climatology_forecast(train_series: FieldSeries, out_vars: Sequence[str] | None = None) -> ClimatologyMap:
    """Per-pixel mean of each output variable over the whole training split."""
    if train_series.T == 0:
        raise EmptySplitError("climatology needs a non-empty training split")
    out_vars = list(train_series.names if out_vars is None else out_vars)
    idx = [train_series.index(v) for v in out_vars]
    clim = np.nanmean(train_series.data[:, idx].astype(np.float64), axis=0)
    return ClimatologyMap(field=clim, source="train")


def predict_climatology(clim: ClimatologyMap, n: int) -> np.ndarray:
    """Repeat the climatology ``n`` times: ``n x C x H x W``."""
    f = np.asarray(clim.field, dtype=np.float64)
    if f.ndim == 2:
        f = f[None]
    return np.broadcast_to(f, (n,) + f.shape).copy()


def persistence_forecast(samples: SampleSet, out_vars: Sequence[str] | None = None) -> np.ndarray:
    """Copy each output variable's most recent (offset 0) input channel."""
    out_vars = list(samples.target_names if out_vars is None else out_vars)
    idx = []
    for v in out_vars:
        for name in (channel_name(v, 0), v):
            if name in samples.input_names:
                idx.append(samples.input_names.index(name))
                break
        else:
            raise ConfigurationError(f"persistence: {v!r} has no offset-0 input channel")
    return np.asarray(samples.inputs[:, idx], dtype=np.float64)


# ---------------------------------------------------------------------------
# linear regression


@dataclass(eq=False)
class LinearModel:
    """Ridge regression weights.

    ``local`` mode stores ``H x W x F x C_out`` coefficients, one regression
    per output pixel over the k x k input neighbourhood; ``global`` mode
    stores ``F x (C_out*H*W)`` for a regression on flattened fields.  The
    last feature is always the constant (intercept), which is not penalized.
    """

    mode: str
    k: int
    ridge: float
    input_names: list[str]
    output_names: list[str]
    grid_shape: tuple[int, int]
    periodic_lon: bool
    coef: np.ndarray
    info: dict = field(default_factory=dict)


def _stencil_offsets(k: int) -> list[tuple[int, int]]:
    if k < 1 or k % 2 == 0:
        raise ConfigurationError(f"stencil size must be odd and >= 1, got {k}")
    r = k // 2
    return [(di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1)]


def _row_features(inputs: np.ndarray, i: int, k: int, periodic: bool) -> np.ndarray:
    """Features for every pixel of row ``i``: W x N x F (constant last)."""
    N, C, H, W = inputs.shape
    cols = np.arange(W)
    feats = []
    # Neighbours beyond the poles (or a non-periodic edge) are zero features.
    for c in range(C):
        for di, dj in _stencil_offsets(k):
            r = i + di
            if not 0 <= r < H:
                feats.append(np.zeros((N, W)))
                continue
            if periodic:
                feats.append(inputs[:, c, r, (cols + dj) % W])  # N x W
            else:
                inside = (cols + dj >= 0) & (cols + dj < W)
                feats.append(np.where(inside, inputs[:, c, r, np.clip(cols + dj, 0, W - 1)], 0.0))
    X = np.stack(feats, axis=-1).astype(np.float64)  # N x W x F-1
    X = np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)
    return np.transpose(X, (1, 0, 2))


def _penalty(F: int, ridge: float) -> np.ndarray:
    d = np.full(F, ridge, dtype=np.float64)
    d[-1] = 0.0
    return np.diag(d)


def _fit_local(inputs, targets, weights, k, ridge, periodic):
    N, C, H, W = inputs.shape
    Cout = targets.shape[1]
    F = C * k * k + 1
    if ridge == 0 and N <= F - 1:
        raise ConfigurationError(f"{N} samples cannot determine {F} coefficients without ridge")
    coef = np.empty((H, W, F, Cout))
    P = _penalty(F, ridge)
    max_resid = 0.0
    for i in range(H):
        X = _row_features(inputs, i, k, periodic)  # W x N x F
        Y = np.transpose(targets[:, :, i, :].astype(np.float64), (2, 0, 1))  # W x N x Cout
        A = weights[i] * np.einsum("wnf,wng->wfg", X, X) + P[None]
        # All-zero features get an identity row so their coefficient is pinned to 0.
        w_idx, f_idx = np.nonzero(~np.any(X != 0, axis=1))
        A[w_idx, f_idx, f_idx] += 1.0
        b = weights[i] * np.einsum("wnf,wnc->wfc", X, Y)
        if ridge == 0:
            cond = np.linalg.cond(A)
            if np.any(~np.isfinite(cond)) or np.any(cond > 1e13):
                raise ConfigurationError("singular normal matrix; set ridge > 0")
        try:
            coef[i] = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise ConfigurationError("singular normal matrix; set ridge > 0") from exc
        r = np.einsum("wfg,wgc->wfc", A, coef[i]) - b
        max_resid = max(max_resid, float(np.abs(r).max() / max(np.abs(b).max(), 1e-300)))
    return coef, {"normal_residual": max_resid}


def _block_cg(apply_A, B, diag, tol, max_iter):
    """Jacobi-preconditioned CG run independently on every column of ``B``."""
    Xs = np.zeros_like(B)
    R = B.copy()
    Z = R / diag
    Pd = Z.copy()
    rz = np.einsum("fo,fo->o", R, Z)
    bnorm = np.linalg.norm(B, axis=0)
    bnorm[bnorm == 0] = 1.0
    it = 0
    rel = np.linalg.norm(R, axis=0) / bnorm
    while it < max_iter and rel.max() > tol:
        AP = apply_A(Pd)
        pAp = np.einsum("fo,fo->o", Pd, AP)
        active = rel > tol
        alpha = np.where(active & (pAp > 0), rz / np.where(pAp > 0, pAp, 1.0), 0.0)
        Xs += alpha * Pd
        R -= alpha * AP
        Z = R / diag
        rz_new = np.einsum("fo,fo->o", R, Z)
        beta = np.where(rz > 0, rz_new / np.where(rz > 0, rz, 1.0), 0.0)
        Pd = Z + beta * Pd
        rz = rz_new
        rel = np.linalg.norm(R, axis=0) / bnorm
        it += 1
    return Xs, float(rel.max()), it


def _fit_global(inputs, targets, weights, ridge, tol, max_iter):
    N = inputs.shape[0]
    X = np.concatenate([inputs.reshape(N, -1).astype(np.float64), np.ones((N, 1))], axis=1)
    Y = targets.reshape(N, -1).astype(np.float64)
    F = X.shape[1]
    Cout, H, W = targets.shape[1:]
    if ridge == 0 and N <= F - 1:
        raise ConfigurationError(f"{N} samples cannot determine {F} coefficients without ridge")
    # Output column o lies on latitude row (o // W) % H.
    lw = np.tile(np.repeat(weights, W), Cout)
    pen = np.full(F, ridge)
    pen[-1] = 0.0

    def apply_A(V):
        return (X.T @ (X @ V)) * lw[None, :] + pen[:, None] * V

    B = (X.T @ Y) * lw[None, :]
    diag = (np.einsum("nf,nf->f", X, X)[:, None] * lw[None, :] + pen[:, None])
    diag[diag <= 0] = 1.0
    coef, resid, iters = _block_cg(apply_A, B, diag, tol, max_iter or 10 * F)
    if resid > tol:
        raise ConfigurationError(f"global regression did not converge (residual {resid:.2e} after {iters} iterations)")
    return coef, {"normal_residual": resid, "iterations": iters}


def linreg_fit(
    samples: SampleSet,
    mode: str = "local",
    k: int = 3,
    ridge: float = 0.0,
    lat_weights=None,
    periodic_lon: bool | None = None,
    tol: float = 1e-8,
    max_iter: int | None = None,
) -> LinearModel:
    """Fit a ridge regression baseline with a latitude-weighted squared loss.

    Args:
        samples: training pairs; inputs and targets must share a grid.
        mode: ``"local"`` (per-pixel k x k stencil, dense normal equations)
            or ``"global"`` (flattened fields, conjugate gradients to
            ``tol`` relative residual of the normal equations).
        ridge: L2 penalty on every coefficient except the intercept.
        lat_weights: per-row loss weights; defaults to the cosine weights of
            ``samples.target_grid``.
    """
    inputs = np.asarray(samples.inputs)
    targets = np.asarray(samples.targets)
    if inputs.shape[2:] != targets.shape[2:]:
        raise ConfigurationError(f"input grid {inputs.shape[2:]} differs from target grid {targets.shape[2:]}")
    H, W = targets.shape[2:]
    grid = samples.target_grid
    if lat_weights is None:
        lat_weights = make_lat_weights(grid).w if grid is not None else np.ones(H)
    weights = np.asarray(getattr(lat_weights, "w", lat_weights), dtype=np.float64)
    if periodic_lon is None:
        periodic_lon = bool(grid.periodic_lon) if grid is not None else False
    if ridge < 0:
        raise ConfigurationError("ridge must be >= 0")
    if mode == "local":
        coef, info = _fit_local(inputs, targets, weights, k, ridge, periodic_lon)
    elif mode == "global":
        coef, info = _fit_global(inputs, targets, weights, ridge, tol, max_iter)
        k = 0
    else:
        raise ConfigurationError(f"unknown regression mode {mode!r}")
    return LinearModel(
        mode=mode,
        k=k,
        ridge=float(ridge),
        input_names=list(samples.input_names),
        output_names=list(samples.target_names),
        grid_shape=(H, W),
        periodic_lon=periodic_lon,
        coef=coef,
        info=info,
    )


def linreg_predict(model: LinearModel, inputs: np.ndarray, input_names: Sequence[str] | None = None) -> np.ndarray:
    """Apply a fitted model to ``N x C_in x H x W`` inputs."""
    x = np.asarray(inputs, dtype=np.float64)
    if input_names is not None and list(input_names) != model.input_names:
        raise ChannelMismatchError(f"model expects inputs {model.input_names}, got {list(input_names)}")
    N, C, H, W = x.shape
    if (H, W) != tuple(model.grid_shape) or C != len(model.input_names):
        raise ConfigurationError(f"inputs {x.shape[1:]} do not match model ({len(model.input_names)}, {model.grid_shape})")
    Cout = len(model.output_names)
    if model.mode == "global":
        X = np.concatenate([x.reshape(N, -1), np.ones((N, 1))], axis=1)
        return (X @ model.coef).reshape(N, Cout, H, W)
    out = np.empty((N, Cout, H, W))
    for i in range(H):
        X = _row_features(x, i, model.k, model.periodic_lon)  # W x N x F
        out[:, :, i, :] = np.transpose(np.einsum("wnf,wfc->wnc", X, model.coef[i]), (1, 2, 0))
    return out


def save_model(model: LinearModel, path) -> None:
    """Write a CLLM v1 record (JSON header, float64 coefficients, CRC32)."""
    header = {
        "mode": model.mode,
        "k": model.k,
        "ridge": model.ridge,
        "input_names": model.input_names,
        "output_names": model.output_names,
        "grid_shape": list(model.grid_shape),
        "periodic_lon": model.periodic_lon,
        "coef_shape": list(model.coef.shape),
        "dtype": "f64",
        "info": model.info,
    }
    text = json.dumps(header, separators=(",", ":")).encode("utf-8")
    payload = np.ascontiguousarray(model.coef, dtype="<f8")
    tmp = f"{os.fspath(path)}.part"
    with open(tmp, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack("<HI", MODEL_VERSION, len(text)))
        f.write(text)
        f.write(memoryview(payload).cast("B"))
        f.write(struct.pack("<I", zlib.crc32(memoryview(payload).cast("B"))))
    os.replace(tmp, path)


def load_model(path) -> LinearModel:
    with open(path, "rb") as f:
        if f.read(4) != MODEL_MAGIC:
            raise BadMagicError(f"{path} is not a CLLM model file")
        raw = f.read(6)
        if len(raw) < 6:
            raise HeaderParseError("truncated model header")
        version, hlen = struct.unpack("<HI", raw)
        if version != MODEL_VERSION:
            raise UnsupportedVersionError(f"model version {version} is not supported")
        try:
            h = json.loads(f.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise HeaderParseError(f"model header is not valid JSON: {exc}") from exc
        shape = tuple(h["coef_shape"])
        n = int(np.prod(shape))
        coef = np.fromfile(f, dtype="<f8", count=n)
        if coef.size != n:
            raise TruncatedPayloadError("model coefficients truncated")
        tail = f.read(4)
        if len(tail) != 4:
            raise TruncatedPayloadError("model checksum missing")
    if zlib.crc32(memoryview(coef).cast("B")) != struct.unpack("<I", tail)[0]:
        raise ChecksumError(f"{path}: coefficient CRC32 mismatch")
    return LinearModel(
        mode=h["mode"],
        k=int(h["k"]),
        ridge=float(h["ridge"]),
        input_names=list(h["input_names"]),
        output_names=list(h["output_names"]),
        grid_shape=tuple(h["grid_shape"]),
        periodic_lon=bool(h["periodic_lon"]),
        coef=coef.reshape(shape).astype(np.float64),
        info=h.get("info", {}),
    )


# ---------------------------------------------------------------------------
# downscaling


def interp_downscale(low_inputs: np.ndarray, src: Grid, dst: Grid, scheme: str = "bilinear") -> np.ndarray:
    """Interpolate coarse fields (``... x H x W``) onto ``dst``."""
    if scheme == "nearest":
        return regrid_nearest(low_inputs, src, dst)
    if scheme == "bilinear":
        return regrid_bilinear(low_inputs, src, dst)
    raise ConfigurationError(f"unknown interpolation scheme {scheme!r}")
