# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row kernels: GELU, layer norm, softmax and top-k ranking.

Every function mirrors one in ``_kernels_py`` with the same signature and
array contract. Inputs are C-contiguous float64; outputs are freshly allocated.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport erfc, exp, sqrt, INFINITY

cnp.import_array()

cdef double _SQRT1_2 = 0.70710678118654752440
cdef double _INV_SQRT_2PI = 0.39894228040143267794


def gelu_fwd(double[::1] x):
    """Returns ``(gelu(x), Phi(x))``; the CDF is reused by the backward pass."""
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdf_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] y = out
    cdef double[::1] cdf = cdf_arr
    cdef double c
    with nogil:
        for i in range(n):
            c = 0.5 * erfc(-x[i] * _SQRT1_2)
            cdf[i] = c
            y[i] = x[i] * c
    return out, cdf_arr


def gelu_bwd(double[::1] x, double[::1] cdf, double[::1] gy):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] gx = out
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            gx[i] = gy[i] * (cdf[i] + v * _INV_SQRT_2PI * exp(-0.5 * v * v))
    return out


def layer_norm_fwd(double[:, :, ::1] x, double[:, ::1] gain, double[:, ::1] bias, double eps):
    """x is (groups, rows, dim); gain and bias are (groups, dim)."""
    cdef Py_ssize_t G = x.shape[0], R = x.shape[1], D = x.shape[2]
    cdef Py_ssize_t g, r, j
    out = np.empty((G, R, D), dtype=np.float64)
    xhat_arr = np.empty((G, R, D), dtype=np.float64)
    rstd_arr = np.empty((G, R), dtype=np.float64)
    cdef double[:, :, ::1] y = out
    cdef double[:, :, ::1] xh = xhat_arr
    cdef double[:, ::1] rs = rstd_arr
    cdef double mean, var, d, inv
    with nogil:
        for g in range(G):
            for r in range(R):
                mean = 0.0
                for j in range(D):
                    mean += x[g, r, j]
                mean /= D
                var = 0.0
                for j in range(D):
                    d = x[g, r, j] - mean
                    var += d * d
                var /= D
                inv = 1.0 / sqrt(var + eps)
                rs[g, r] = inv
                for j in range(D):
                    d = (x[g, r, j] - mean) * inv
                    xh[g, r, j] = d
                    y[g, r, j] = d * gain[g, j] + bias[g, j]
    return out, xhat_arr, rstd_arr


def layer_norm_bwd(double[:, :, ::1] gy, double[:, :, ::1] xhat, double[:, ::1] rstd,
                   double[:, ::1] gain):
    cdef Py_ssize_t G = gy.shape[0], R = gy.shape[1], D = gy.shape[2]
    cdef Py_ssize_t g, r, j
    gx_arr = np.empty((G, R, D), dtype=np.float64)
    gg_arr = np.zeros((G, D), dtype=np.float64)
    gb_arr = np.zeros((G, D), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, ::1] gg = gg_arr
    cdef double[:, ::1] gb = gb_arr
    cdef double s1, s2, dxh
    with nogil:
        for g in range(G):
            for r in range(R):
                s1 = 0.0
                s2 = 0.0
                for j in range(D):
                    dxh = gy[g, r, j] * gain[g, j]
                    s1 += dxh
                    s2 += dxh * xhat[g, r, j]
                    gg[g, j] += gy[g, r, j] * xhat[g, r, j]
                    gb[g, j] += gy[g, r, j]
                s1 /= D
                s2 /= D
                for j in range(D):
                    dxh = gy[g, r, j] * gain[g, j]
                    gx[g, r, j] = rstd[g, r] * (dxh - s1 - xhat[g, r, j] * s2)
    return gx_arr, gg_arr, gb_arr


def softmax_fwd(double[:, ::1] x):
    """Row softmax; -inf entries get probability 0, an all -inf row maps to zeros."""
    cdef Py_ssize_t R = x.shape[0], D = x.shape[1]
    cdef Py_ssize_t r, j
    out = np.empty((R, D), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double m, s, e
    with nogil:
        for r in range(R):
            m = -INFINITY
            for j in range(D):
                if x[r, j] > m:
                    m = x[r, j]
            if m == -INFINITY:
                for j in range(D):
                    y[r, j] = 0.0
                continue
            s = 0.0
            for j in range(D):
                e = exp(x[r, j] - m)
                y[r, j] = e
                s += e
            for j in range(D):
                y[r, j] = y[r, j] / s
    return out


def softmax_bwd(double[:, ::1] y, double[:, ::1] gy):
    cdef Py_ssize_t R = y.shape[0], D = y.shape[1]
    cdef Py_ssize_t r, j
    out = np.empty((R, D), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double dot
    with nogil:
        for r in range(R):
            dot = 0.0
            for j in range(D):
                dot += y[r, j] * gy[r, j]
            for j in range(D):
                gx[r, j] = y[r, j] * (gy[r, j] - dot)
    return out


def topk_rows(double[:, ::1] scores, Py_ssize_t k):
    """Indices of the k highest scores per row, descending; ties go to the lower index."""
    cdef Py_ssize_t R = scores.shape[0], N = scores.shape[1]
    cdef Py_ssize_t r, j, p, q
    if k > N:
        raise ValueError(f"k={k} exceeds the number of candidates {N}")
    out = np.empty((R, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] idx = out
    cdef Py_ssize_t filled
    cdef double v
    with nogil:
        for r in range(R):
            filled = 0
            for j in range(N):
                v = scores[r, j]
                # strict comparison keeps earlier (lower) ids ahead on ties
                if filled == k and not (v > scores[r, idx[r, k - 1]]):
                    continue
                p = filled if filled < k else k - 1
                while p > 0 and v > scores[r, idx[r, p - 1]]:
                    idx[r, p] = idx[r, p - 1]
                    p -= 1
                idx[r, p] = j
                if filled < k:
                    filled += 1
    return out
