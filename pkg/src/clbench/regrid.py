"""Nearest and bilinear resampling between lat-lon grids, crop and pad."""
from __future__ import annotations

import numpy as np

from clbench import kernels
from clbench.errors import ConfigurationError
from clbench.grid import Grid, RegionBox, lon_distance, subgrid_indices

_SNAP = 1e-9


def _as_stack(field: np.ndarray, grid: Grid) -> tuple[np.ndarray, tuple]:
    a = np.asarray(field)
    if a.shape[-2:] != grid.shape:
        raise ConfigurationError(f"field trailing shape {a.shape[-2:]} does not match grid {grid.shape}")
    lead = a.shape[:-2]
    return a.reshape((-1,) + grid.shape), lead


def nearest_indices(src: Grid, dst: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Per-axis nearest source index for every target row and column.

    Distances are angular per axis; ties go to the smaller source index.
    """
    dlat = np.abs(dst.lats[:, None] - src.lats[None, :])
    rows = np.argmin(dlat, axis=1)
    dlon = lon_distance(dst.lons[:, None], src.lons[None, :], src.periodic_lon)
    cols = np.argmin(dlon, axis=1)
    return rows, cols


def regrid_nearest(field: np.ndarray, src: Grid, dst: Grid) -> np.ndarray:
    """Nearest-neighbour resample of ``(..., H, W)`` onto ``dst``."""
    stack, lead = _as_stack(field, src)
    rows, cols = nearest_indices(src, dst)
    out = stack[:, rows][:, :, cols]
    return out.reshape(lead + dst.shape)


def _lat_stencil(src_lats: np.ndarray, dst_lats: np.ndarray):
    H = src_lats.size
    idx = np.arange(H, dtype=np.float64)
    if src_lats[0] < src_lats[-1]:
        pos = np.interp(dst_lats, src_lats, idx)
    else:
        pos = np.interp(dst_lats, src_lats[::-1], idx[::-1])
    # np.interp clamps outside the outermost centers, which is the edge-row rule.
    return _split(pos, H, periodic=False)


def _lon_stencil(src: Grid, dst_lons: np.ndarray):
    W = src.W
    if src.periodic_lon:
        pos = np.mod(dst_lons - src.lons[0], 360.0) / src.dlon
        pos = np.where(pos >= W, pos - W, pos)
        return _split(pos, W, periodic=True)
    pos = np.interp(dst_lons, src.lons, np.arange(W, dtype=np.float64))
    return _split(pos, W, periodic=False)


def _split(pos: np.ndarray, n: int, periodic: bool):
    near = np.round(pos)
    pos = np.where(np.abs(pos - near) < _SNAP, near, pos)
    lo = np.floor(pos).astype(np.intp)
    frac = pos - lo
    if periodic:
        lo = lo % n
        hi = (lo + 1) % n
    else:
        lo = np.clip(lo, 0, n - 1)
        hi = np.minimum(lo + 1, n - 1)
        frac = np.where(lo == n - 1, 0.0, frac)
    return lo, hi, frac


def bilinear_stencil(src: Grid, dst: Grid):
    """Corner indices and second-corner weights along each axis."""
    i0, i1, wi = _lat_stencil(src.lats, dst.lats)
    j0, j1, wj = _lon_stencil(src, dst.lons)
    return i0, i1, wi, j0, j1, wj


def regrid_bilinear(field: np.ndarray, src: Grid, dst: Grid) -> np.ndarray:
    """Bilinear resample of ``(..., H, W)`` onto ``dst``.

    Longitude wraps across the seam on periodic source grids; targets beyond
    the outermost source latitudes take the edge row.  A NaN in any corner
    with non-zero weight makes the output NaN.
    """
    if src.H < 2 or src.W < 2:
        raise ConfigurationError(f"bilinear needs a source of at least 2x2, got {src.H}x{src.W}")
    stack, lead = _as_stack(field, src)
    out = kernels.bilinear_apply(stack, *bilinear_stencil(src, dst))
    return out.reshape(lead + dst.shape)


def crop(field: np.ndarray, grid: Grid, box: RegionBox) -> tuple[np.ndarray, Grid]:
    """Cut ``box`` out of ``(..., H, W)``; returns the block and its grid."""
    rows, cols = subgrid_indices(grid, box)
    a = np.asarray(field)
    return a[..., rows, :][..., cols], grid.subgrid(rows, cols)


def pad_to(field: np.ndarray, H_out: int, W_out: int, fill: float = 0.0, anchor: tuple[int, int] = (0, 0)):
    """Place ``(..., H, W)`` at ``anchor`` inside an ``H_out x W_out`` canvas.

    Returns ``(padded, valid)`` where ``valid`` is the H_out x W_out boolean
    footprint of the source block.
    """
    a = np.asarray(field)
    H, W = a.shape[-2:]
    r, c = anchor
    if H_out < H or W_out < W:
        raise ConfigurationError(f"cannot pad {H}x{W} into smaller {H_out}x{W_out}")
    if r < 0 or c < 0 or r + H > H_out or c + W > W_out:
        raise ConfigurationError(f"anchor {anchor} puts the {H}x{W} block outside {H_out}x{W_out}")
    out = np.full(a.shape[:-2] + (H_out, W_out), fill, dtype=a.dtype)
    out[..., r : r + H, c : c + W] = a
    valid = np.zeros((H_out, W_out), dtype=bool)
    valid[r : r + H, c : c + W] = True
    return out, valid


def unpad(field: np.ndarray, H: int, W: int, anchor: tuple[int, int] = (0, 0)) -> np.ndarray:
    r, c = anchor
    return np.asarray(field)[..., r : r + H, c : c + W]
