# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled implementations of the hot numeric kernels.

Same contracts as ``_kernels_py``; loops are fused so each kernel walks its
operands once. GELU uses libm's double-precision erf, matching the exact
error-function form of the fallback.
"""

import numpy as np

from libc.math cimport erf, exp, sqrt

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT2PI = 0.3989422804014327


def gelu_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double v
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            y[i, j] = v * 0.5 * (1.0 + erf(v * INV_SQRT2))
    return out


def gelu_bwd(double[:, ::1] x, double[:, ::1] gout):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] g = out
    cdef double v
    for i in range(n):
        for j in range(d):
            v = x[i, j]
            g[i, j] = gout[i, j] * (
                0.5 * (1.0 + erf(v * INV_SQRT2)) + v * exp(-0.5 * v * v) * INV_SQRT2PI
            )
    return out


def softmax_fwd(double[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] p = out
    cdef double mx, s
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, d):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(d):
            p[i, j] = exp(x[i, j] - mx)
            s += p[i, j]
        for j in range(d):
            p[i, j] /= s
    return out


def softmax_bwd(double[:, ::1] p, double[:, ::1] gout):
    cdef Py_ssize_t n = p.shape[0], d = p.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] g = out
    cdef double inner
    for i in range(n):
        inner = 0.0
        for j in range(d):
            inner += gout[i, j] * p[i, j]
        for j in range(d):
            g[i, j] = p[i, j] * (gout[i, j] - inner)
    return out


def layernorm_fwd(double[:, ::1] x, double[::1] gamma, double[::1] beta, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    xhat_arr = np.empty((n, d), dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] y = out, xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, r, c
    for i in range(n):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            xhat[i, j] = (x[i, j] - mu) * r
            y[i, j] = xhat[i, j] * gamma[j] + beta[j]
    return out, xhat_arr, rstd_arr


def layernorm_bwd(double[:, ::1] xhat, double[::1] rstd, double[::1] gamma,
                  double[:, ::1] gout):
    cdef Py_ssize_t n = xhat.shape[0], d = xhat.shape[1], i, j
    gx_arr = np.empty((n, d), dtype=np.float64)
    ggamma_arr = np.zeros(d, dtype=np.float64)
    gbeta_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggamma = ggamma_arr, gbeta = gbeta_arr
    cdef double m1, m2, gh
    for i in range(n):
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            gh = gout[i, j] * gamma[j]
            m1 += gh
            m2 += gh * xhat[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            gh = gout[i, j] * gamma[j]
            gx[i, j] = rstd[i] * (gh - m1 - xhat[i, j] * m2)
            ggamma[j] += gout[i, j] * xhat[i, j]
            gbeta[j] += gout[i, j]
    return gx_arr, ggamma_arr, gbeta_arr


def adamw_update(double[::1] param, double[::1] grad, double[::1] m, double[::1] v,
                 long step, double lr, double wd, double beta1, double beta2,
                 double eps):
    cdef Py_ssize_t n = param.shape[0], i
    cdef double bc1 = 1.0 - beta1**step
    cdef double bc2 = 1.0 - beta2**step
    cdef double mhat, vhat
    for i in range(n):
        m[i] = beta1 * m[i] + (1.0 - beta1) * grad[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i]
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        param[i] -= lr * (mhat / (sqrt(vhat) + eps) + wd * param[i])
