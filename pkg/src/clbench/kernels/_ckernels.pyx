# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; see _pykernels.py for the reference semantics."""
import numpy as np
cimport numpy as cnp
from libc.math cimport isnan, floor, NAN

cnp.import_array()


def trailing_mean(data, Py_ssize_t window):
    cdef const double[:, :, ::1] x = np.ascontiguousarray(data, dtype=np.float64)
    cdef Py_ssize_t T = x.shape[0], H = x.shape[1], W = x.shape[2]
    if window < 1 or window > T:
        raise ValueError(f"window {window} incompatible with {T} samples")
    out_arr = np.empty((T - window + 1, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t t, i, j
    cdef double s, v
    cdef long nnan
    with nogil:
        for i in range(H):
            for j in range(W):
                s = 0.0
                nnan = 0
                for t in range(T):
                    v = x[t, i, j]
                    if isnan(v):
                        nnan += 1
                    else:
                        s += v
                    if t >= window:
                        v = x[t - window, i, j]
                        if isnan(v):
                            nnan -= 1
                        else:
                            s -= v
                    if t >= window - 1:
                        if nnan > 0:
                            out[t - window + 1, i, j] = NAN
                        else:
                            out[t - window + 1, i, j] = s / window
    return out_arr


def stencil_blend(means, double w_center, double w_edge, double w_vertex, bint periodic, bint renormalize):
    cdef const double[:, :, ::1] m = np.ascontiguousarray(means, dtype=np.float64)
    cdef Py_ssize_t T = m.shape[0], H = m.shape[1], W = m.shape[2]
    out_arr = np.empty((T, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t t, i, j, r, c
    cdef int di, dj
    cdef double acc, wsum, wt
    with nogil:
        for t in range(T):
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    wsum = 0.0
                    for di in range(-1, 2):
                        r = i + di
                        if r < 0 or r >= H:
                            continue
                        for dj in range(-1, 2):
                            c = j + dj
                            if periodic:
                                c = (c + W) % W
                            elif c < 0 or c >= W:
                                continue
                            if di == 0 and dj == 0:
                                wt = w_center
                            elif di == 0 or dj == 0:
                                wt = w_edge
                            else:
                                wt = w_vertex
                            acc += wt * m[t, r, c]
                            wsum += wt
                    if renormalize:
                        acc = acc / wsum
                    out[t, i, j] = acc
    return out_arr


def rank_counts(members, truth, u):
    cdef const double[:, ::1] ens = np.ascontiguousarray(members, dtype=np.float64)
    cdef const double[::1] x = np.ascontiguousarray(truth, dtype=np.float64)
    cdef const double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef Py_ssize_t M = ens.shape[0], P = ens.shape[1]
    counts_arr = np.zeros(M + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = counts_arr
    below_arr = np.zeros(P, dtype=np.int32)
    equal_arr = np.zeros(P, dtype=np.int32)
    cdef int[::1] below = below_arr
    cdef int[::1] equal = equal_arr
    cdef Py_ssize_t p, k
    cdef long extra
    cdef double v
    with nogil:
        # Member-major, branch-free sweep so the inner loop vectorizes.
        for k in range(M):
            for p in range(P):
                v = ens[k, p]
                below[p] += v < x[p]
                equal[p] += v == x[p]
        for p in range(P):
            extra = <long>floor(uu[p] * (equal[p] + 1))
            if extra > equal[p]:
                extra = equal[p]
            counts[below[p] + extra] += 1
    return counts_arr


def weighted_step_sums(values, weights, mask):
    cdef const double[:, :, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    cdef const cnp.uint8_t[:, :, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t N = v.shape[0], H = v.shape[1], W = v.shape[2]
    num_arr = np.zeros(N, dtype=np.float64)
    den_arr = np.zeros(N, dtype=np.float64)
    cdef double[::1] num = num_arr
    cdef double[::1] den = den_arr
    cdef Py_ssize_t k, i, j
    cdef double rs, rd
    with nogil:
        for k in range(N):
            for i in range(H):
                rs = 0.0
                rd = 0.0
                for j in range(W):
                    if m[k, i, j]:
                        rs += v[k, i, j]
                        rd += 1.0
                num[k] += w[i] * rs
                den[k] += w[i] * rd
    return num_arr, den_arr


def bilinear_apply(fields, i0, i1, wi, j0, j1, wj):
    cdef const double[:, :, ::1] f = np.ascontiguousarray(fields, dtype=np.float64)
    cdef const cnp.intp_t[::1] a0 = np.ascontiguousarray(i0, dtype=np.intp)
    cdef const cnp.intp_t[::1] a1 = np.ascontiguousarray(i1, dtype=np.intp)
    cdef const cnp.intp_t[::1] b0 = np.ascontiguousarray(j0, dtype=np.intp)
    cdef const cnp.intp_t[::1] b1 = np.ascontiguousarray(j1, dtype=np.intp)
    cdef const double[::1] fa = np.ascontiguousarray(wi, dtype=np.float64)
    cdef const double[::1] fb = np.ascontiguousarray(wj, dtype=np.float64)
    cdef Py_ssize_t B = f.shape[0], Ho = a0.shape[0], Wo = b0.shape[0]
    out_arr = np.empty((B, Ho, Wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t b, p, q
    cdef double w00, w01, w10, w11, acc
    with nogil:
        for b in range(B):
            for p in range(Ho):
                for q in range(Wo):
                    w00 = (1.0 - fa[p]) * (1.0 - fb[q])
                    w01 = (1.0 - fa[p]) * fb[q]
                    w10 = fa[p] * (1.0 - fb[q])
                    w11 = fa[p] * fb[q]
                    acc = 0.0
                    if w00 > 0:
                        acc += w00 * f[b, a0[p], b0[q]]
                    if w01 > 0:
                        acc += w01 * f[b, a0[p], b1[q]]
                    if w10 > 0:
                        acc += w10 * f[b, a1[p], b0[q]]
                    if w11 > 0:
                        acc += w11 * f[b, a1[p], b1[q]]
                    out[b, p, q] = acc
    return out_arr
