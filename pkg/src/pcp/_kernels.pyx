# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: LASSO coordinate descent on a Gram system, im2col/col2im."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


cdef inline double _soft(double x, double t) nogil:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


def lasso_cd_gram(double[:, ::1] gram, double[::1] corr, double lam,
                  cnp.uint8_t[::1] frozen, double[::1] beta0,
                  double tol=1e-8, int max_sweeps=10000):
    cdef Py_ssize_t c = gram.shape[0]
    cdef Py_ssize_t i, j
    cdef int sweep
    cdef double r, new, delta, max_delta
    cdef double half = 0.5 * lam
    beta_arr = np.array(beta0, dtype=np.float64, copy=True)
    cdef double[::1] beta = beta_arr
    # grad[i] = (G beta)_i, kept in sync with beta
    grad_arr = np.asarray(gram) @ beta_arr
    cdef double[::1] gb = grad_arr
    with nogil:
        for i in range(c):
            if frozen[i] and beta[i] != 0.0:
                for j in range(c):
                    gb[j] -= gram[j, i] * beta[i]
                beta[i] = 0.0
        sweep = 0
        while sweep < max_sweeps:
            sweep += 1
            max_delta = 0.0
            for i in range(c):
                if frozen[i] or gram[i, i] <= 0.0:
                    continue
                r = corr[i] - (gb[i] - gram[i, i] * beta[i])
                new = _soft(r, half) / gram[i, i]
                delta = new - beta[i]
                if delta != 0.0:
                    for j in range(c):
                        gb[j] += gram[j, i] * delta
                    beta[i] = new
                    if fabs(delta) > max_delta:
                        max_delta = fabs(delta)
            if max_delta < tol:
                break
    return beta_arr, sweep


def im2col(double[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t oh = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, oh, ow, c, kh, kw), dtype=np.float64)
    cdef double[:, :, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oy, ox, ky, kx, iy, ix
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    for ch in range(c):
                        for ky in range(kh):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= H:
                                continue
                            for kx in range(kw):
                                ix = ox * stride + kx - pad
                                if ix < 0 or ix >= W:
                                    continue
                                out[b, oy, ox, ch, ky, kx] = x[b, ch, iy, ix]
    return out_arr.reshape(n * oh * ow, c * kh * kw)


def col2im(double[:, ::1] cols, shape, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], H = shape[2], W = shape[3]
    cdef Py_ssize_t oh = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t ow = (W + 2 * pad - kw) // stride + 1
    out_arr = np.zeros((n, c, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, ch, oy, ox, ky, kx, iy, ix, row, col
    with nogil:
        for b in range(n):
            for oy in range(oh):
                for ox in range(ow):
                    row = (b * oh + oy) * ow + ox
                    for ch in range(c):
                        for ky in range(kh):
                            iy = oy * stride + ky - pad
                            if iy < 0 or iy >= H:
                                continue
                            for kx in range(kw):
                                ix = ox * stride + kx - pad
                                if ix < 0 or ix >= W:
                                    continue
                                col = (ch * kh + ky) * kw + kx
                                out[b, ch, iy, ix] += cols[row, col]
    return out_arr
