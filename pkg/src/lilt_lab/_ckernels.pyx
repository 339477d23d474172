# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-row kernels.

Every routine walks rows in index order and reduces left to right, so results
are bit-reproducible for a given build. Inputs must be C-contiguous 2-D arrays
of one floating dtype; the Python wrapper in ``kernels`` takes care of that.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, erf, M_SQRT1_2, M_2_SQRTPI

cnp.import_array()

ctypedef fused real:
    float
    double


def layer_norm_fwd(real[:, ::1] x, real[::1] gamma, real[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty((n, d), dtype=dtype)
    xhat_arr = np.empty((n, d), dtype=dtype)
    rstd_arr = np.empty(n, dtype=dtype)
    cdef real[:, ::1] y = y_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] rstd = rstd_arr
    cdef double mean, var, diff, r
    with nogil:
        for i in range(n):
            mean = 0.0
            for j in range(d):
                mean += x[i, j]
            mean /= d
            var = 0.0
            for j in range(d):
                diff = x[i, j] - mean
                var += diff * diff
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = <real>r
            for j in range(d):
                xhat[i, j] = <real>((x[i, j] - mean) * r)
                y[i, j] = gamma[j] * xhat[i, j] + beta[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(real[:, ::1] gy, real[:, ::1] xhat, real[::1] rstd, real[::1] gamma):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, d), dtype=dtype)
    gg_arr = np.zeros(d, dtype=np.float64)
    gb_arr = np.zeros(d, dtype=np.float64)
    cdef real[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double s1, s2, g
    with nogil:
        for i in range(n):
            s1 = 0.0
            s2 = 0.0
            for j in range(d):
                g = gy[i, j] * gamma[j]
                s1 += g
                s2 += g * xhat[i, j]
                gg[j] += gy[i, j] * xhat[i, j]
                gb[j] += gy[i, j]
            s1 /= d
            s2 /= d
            for j in range(d):
                g = gy[i, j] * gamma[j]
                gx[i, j] = <real>(rstd[i] * (g - s1 - xhat[i, j] * s2))
    return gx_arr, gg_arr.astype(dtype), gb_arr.astype(dtype)


def gelu_fwd(real[::1] x):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if real is float else np.float64
    y_arr = np.empty(n, dtype=dtype)
    cdef real[::1] y = y_arr
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            y[i] = <real>(0.5 * v * (1.0 + erf(v * M_SQRT1_2)))
    return y_arr


def gelu_bwd(real[::1] x, real[::1] gy):
    cdef Py_ssize_t n = x.shape[0], i
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty(n, dtype=dtype)
    cdef real[::1] gx = gx_arr
    cdef double v, cdf, pdf
    with nogil:
        for i in range(n):
            v = x[i]
            cdf = 0.5 * (1.0 + erf(v * M_SQRT1_2))
            pdf = 0.5 * M_2_SQRTPI * M_SQRT1_2 * exp(-0.5 * v * v)
            gx[i] = <real>(gy[i] * (cdf + v * pdf))
    return gx_arr


def softmax_fwd(real[:, ::1] x):
    """Row softmax; ``-inf`` entries come out as exact zeros."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    p_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] p = p_arr
    cdef double m, s, e
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            s = 0.0
            for j in range(d):
                e = exp(x[i, j] - m)
                p[i, j] = <real>e
                s += e
            for j in range(d):
                p[i, j] = <real>(p[i, j] / s)
    return p_arr


def softmax_bwd(real[:, ::1] p, real[:, ::1] gp):
    cdef Py_ssize_t n = p.shape[0], d = p.shape[1], i, j
    dtype = np.float32 if real is float else np.float64
    gx_arr = np.empty((n, d), dtype=dtype)
    cdef real[:, ::1] gx = gx_arr
    cdef double dot
    with nogil:
        for i in range(n):
            dot = 0.0
            for j in range(d):
                dot += gp[i, j] * p[i, j]
            for j in range(d):
                gx[i, j] = <real>(p[i, j] * (gp[i, j] - dot))
    return gx_arr


def match_ranks(real[:, ::1] sim, cnp.int64_t[::1] target):
    """1-based rank of ``target[q]`` in row ``q`` of ``sim``.

    Candidates scoring strictly higher, or equal with a lower index, rank
    ahead of the target.
    """
    cdef Py_ssize_t nq = sim.shape[0], nc = sim.shape[1], q, c
    ranks_arr = np.empty(nq, dtype=np.int64)
    cdef cnp.int64_t[::1] ranks = ranks_arr
    cdef cnp.int64_t t, r
    cdef real s
    with nogil:
        for q in range(nq):
            t = target[q]
            s = sim[q, t]
            r = 1
            for c in range(nc):
                if sim[q, c] > s or (sim[q, c] == s and c < t):
                    r += 1
            ranks[q] = r
    return ranks_arr
