"""Pure-numpy implementations of the hot kernels.

Semantics must match ``_ckernels.pyx`` exactly; floating results may differ
only in summation order.
"""
import numpy as np


def trailing_mean(data, window):
    """Mean over the trailing ``window`` samples (inclusive of t) per pixel.

    ``data`` is T x H x W; output row ``k`` is the window ending at
    ``k + window - 1``.  A window containing NaN yields NaN.
    """
    x = np.asarray(data, dtype=np.float64)
    T = x.shape[0]
    if window < 1 or window > T:
        raise ValueError(f"window {window} incompatible with {T} samples")
    nan = np.isnan(x)
    vals = np.where(nan, 0.0, x)
    cs = np.cumsum(vals, axis=0)
    cn = np.cumsum(nan, axis=0, dtype=np.int64)
    zero = np.zeros((1,) + x.shape[1:])
    cs = np.concatenate([zero, cs])
    cn = np.concatenate([zero.astype(np.int64), cn])
    s = cs[window:] - cs[:-window]
    n = cn[window:] - cn[:-window]
    out = s / window
    out[n > 0] = np.nan
    return out


def stencil_blend(means, w_center, w_edge, w_vertex, periodic, renormalize):
    """3x3 neighbourhood blend; longitude wraps when ``periodic``.

    Off-grid latitude neighbours (and longitude neighbours on
    non-periodic grids) are omitted; with ``renormalize`` the result is
    divided by the sum of the weights actually used.
    """
    m = np.asarray(means, dtype=np.float64)
    T, H, W = m.shape
    out = np.zeros_like(m)
    wsum = np.zeros((H, W))
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            wt = w_center if di == 0 and dj == 0 else (w_edge if di == 0 or dj == 0 else w_vertex)
            rows = np.arange(H) + di
            cols = np.arange(W) + dj
            rvalid = (rows >= 0) & (rows < H)
            if periodic:
                cols = cols % W
                cvalid = np.ones(W, dtype=bool)
            else:
                cvalid = (cols >= 0) & (cols < W)
            rr = np.clip(rows, 0, H - 1)
            cc = np.clip(cols, 0, W - 1)
            valid = rvalid[:, None] & cvalid[None, :]
            shifted = m[:, rr][:, :, cc]
            out += np.where(valid[None], wt * shifted, 0.0)
            wsum += np.where(valid, wt, 0.0)
    if renormalize:
        out /= wsum[None]
    return out


def rank_counts(members, truth, u):
    """Histogram of the truth's rank among ``M`` members (M+1 bins).

    ``members`` is M x P, ``truth`` and ``u`` length P.  Ties between truth
    and members are split using ``u`` (uniform on [0, 1)): the rank is
    ``below + floor(u * (equal + 1))``.
    """
    ens = np.asarray(members, dtype=np.float64)
    x = np.asarray(truth, dtype=np.float64)
    M = ens.shape[0]
    below = (ens < x[None]).sum(axis=0)
    equal = (ens == x[None]).sum(axis=0)
    extra = np.minimum(np.floor(np.asarray(u) * (equal + 1)).astype(np.int64), equal)
    rank = below + extra
    return np.bincount(rank, minlength=M + 1).astype(np.int64)


def weighted_step_sums(values, weights, mask):
    """Per-timestep ``sum(w_i m v)`` and ``sum(w_i m)`` over an N x H x W stack.

    ``mask`` is a uint8 N x H x W array (1 = include).  Masked-out entries
    never contribute, even if ``values`` holds NaN there.
    """
    v = np.asarray(values, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    w = np.asarray(weights, dtype=np.float64)
    wm = np.where(m, w[None, :, None], 0.0)
    num = np.where(m, wm * v, 0.0).sum(axis=(1, 2))
    den = wm.sum(axis=(1, 2))
    return num, den


def bilinear_apply(fields, i0, i1, wi, j0, j1, wj):
    """Blend four corners per target point; zero-weight corners are skipped.

    ``fields`` is B x H x W; index/weight vectors address rows (length H')
    and columns (length W').  ``wi``/``wj`` weight the second corner.
    """
    f = np.asarray(fields, dtype=np.float64)
    B = f.shape[0]
    Ho, Wo = len(i0), len(j0)
    out = np.zeros((B, Ho, Wo))
    for ri, ci, w in (
        (i0, j0, np.outer(1.0 - wi, 1.0 - wj)),
        (i0, j1, np.outer(1.0 - wi, wj)),
        (i1, j0, np.outer(wi, 1.0 - wj)),
        (i1, j1, np.outer(wi, wj)),
    ):
        corner = f[:, ri][:, :, ci]
        active = w > 0
        out += np.where(active[None], w[None] * corner, 0.0)
    return out
