# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: same-padded convolution and nearest-code search.

Reduction order is fixed (plain nested loops) so results do not depend on
thread count or BLAS configuration.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t k = w.shape[0], cout = w.shape[3], p = k // 2
    out_arr = np.zeros((n, h, wd, cout), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, i, j, dy, dx, yi, xj, c, o
    cdef double v
    for b in range(n):
        for i in range(h):
            for j in range(wd):
                for dy in range(k):
                    yi = i + dy - p
                    if yi < 0 or yi >= h:
                        continue
                    for dx in range(k):
                        xj = j + dx - p
                        if xj < 0 or xj >= wd:
                            continue
                        for c in range(cin):
                            v = x[b, yi, xj, c]
                            if v == 0.0:
                                continue
                            for o in range(cout):
                                out[b, i, j, o] += v * w[dy, dx, c, o]
    return out_arr


def conv2d_backward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, :, ::1] gy):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], wd = x.shape[2], cin = x.shape[3]
    cdef Py_ssize_t k = w.shape[0], cout = w.shape[3], p = k // 2
    gx_arr = np.zeros((n, h, wd, cin), dtype=np.float64)
    gw_arr = np.zeros((k, k, cin, cout), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t b, i, j, dy, dx, yi, xj, c, o
    cdef double xv, acc
    for b in range(n):
        for i in range(h):
            for j in range(wd):
                for dy in range(k):
                    yi = i + dy - p
                    if yi < 0 or yi >= h:
                        continue
                    for dx in range(k):
                        xj = j + dx - p
                        if xj < 0 or xj >= wd:
                            continue
                        for c in range(cin):
                            xv = x[b, yi, xj, c]
                            acc = 0.0
                            for o in range(cout):
                                gw[dy, dx, c, o] += xv * gy[b, i, j, o]
                                acc = acc + w[dy, dx, c, o] * gy[b, i, j, o]
                            gx[b, yi, xj, c] += acc
    return gx_arr, gw_arr


def nearest_codes(const double[:, ::1] z, const double[:, ::1] codes):
    cdef Py_ssize_t m = z.shape[0], d = z.shape[1], nq = codes.shape[0]
    idx_arr = np.empty(m, dtype=np.int64)
    best_arr = np.empty(m, dtype=np.float64)
    cdef cnp.int64_t[::1] idx = idx_arr
    cdef double[::1] best = best_arr
    cdef Py_ssize_t r, q, t, arg
    cdef double acc, diff, cur
    for r in range(m):
        cur = 1.0e308
        arg = 0
        for q in range(nq):
            acc = 0.0
            for t in range(d):
                diff = z[r, t] - codes[q, t]
                acc = acc + diff * diff
            # strict comparison keeps the lowest index on ties
            if acc < cur:
                cur = acc
                arg = q
        idx[r] = arg
        best[r] = cur
    return idx_arr, best_arr
