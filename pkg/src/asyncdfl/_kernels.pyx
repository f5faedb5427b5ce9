# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt

cnp.import_array()


def masked_average(values, masks, weights, fallback):
    cdef double[:, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef double[:, ::1] o = np.ascontiguousarray(masks, dtype=np.float64)
    cdef double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    out_arr = np.array(fallback, dtype=np.float64, copy=True)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t m = v.shape[0], k = v.shape[1], j, p
    cdef double num, den, wm
    if o.shape[0] != m or o.shape[1] != k or w.shape[0] != m or out.shape[0] != k:
        raise ValueError("shape mismatch in masked_average")
    for p in range(k):
        num = 0.0
        den = 0.0
        for j in range(m):
            wm = w[j] * o[j, p]
            num += wm * v[j, p]
            den += wm
        if den != 0.0:
            out[p] = num / den
    return out_arr


def softmax_xent_grad(x, y, w, b):
    cdef double[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef long[::1] yv = np.ascontiguousarray(y, dtype=np.int64)
    cdef double[:, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], c = wv.shape[1]
    cdef Py_ssize_t i, a, k
    gw_arr = np.zeros((d, c), dtype=np.float64)
    gb_arr = np.zeros(c, dtype=np.float64)
    cdef double[:, ::1] gw = gw_arr
    cdef double[::1] gb = gb_arr
    z_arr = np.empty(c, dtype=np.float64)
    cdef double[::1] z = z_arr
    cdef double zmax, s, total = 0.0, inv_n = 1.0 / n, xa
    for i in range(n):
        for k in range(c):
            z[k] = bv[k]
        for a in range(d):
            xa = xv[i, a]
            for k in range(c):
                z[k] += xa * wv[a, k]
        zmax = z[0]
        for k in range(1, c):
            if z[k] > zmax:
                zmax = z[k]
        s = 0.0
        for k in range(c):
            z[k] = z[k] - zmax
            s += exp(z[k])
        total += log(s) - z[yv[i]]
        for k in range(c):
            z[k] = exp(z[k]) / s
        z[yv[i]] -= 1.0
        for k in range(c):
            z[k] *= inv_n
            gb[k] += z[k]
        for a in range(d):
            xa = xv[i, a]
            for k in range(c):
                gw[a, k] += xa * z[k]
    return total * inv_n, gw_arr, gb_arr


def mean_pairwise_distance(models):
    cdef double[:, ::1] v = np.ascontiguousarray(models, dtype=np.float64)
    cdef Py_ssize_t m = v.shape[0], k = v.shape[1], i, j, p
    cdef double total = 0.0, acc, diff
    if m < 2:
        return 0.0
    for i in range(m - 1):
        for j in range(i + 1, m):
            acc = 0.0
            for p in range(k):
                diff = v[j, p] - v[i, p]
                acc += diff * diff
            total += sqrt(acc)
    return total / (m * (m - 1) / 2.0)
