# cython: boundscheck=False, wraparound=False, cdivision=True
"""Fused hot-path kernels: layer norm, softmax, GELU, AdamW, scatter-add.

Mirrors `ppma._kernels_py`; selected in `ppma.backend` when compiled.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport erf, exp, sqrt, pow

cnp.import_array()

ctypedef fused real:
    float
    double

cdef double INV_SQRT2 = 0.7071067811865476
cdef double INV_SQRT_2PI = 0.3989422804014327


def layer_norm_forward(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc, var, istd
    out_arr = np.empty((r, d), dtype=np.asarray(x).dtype)
    xhat_arr = np.empty((r, d), dtype=np.asarray(x).dtype)
    istd_arr = np.empty(r, dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    cdef real[:, ::1] xhat = xhat_arr
    cdef real[::1] inv_std = istd_arr
    for i in range(r):
        acc = 0.0
        for j in range(d):
            acc += x[i, j]
        acc /= d
        var = 0.0
        for j in range(d):
            var += (x[i, j] - acc) * (x[i, j] - acc)
        var /= d
        istd = 1.0 / sqrt(var + eps)
        inv_std[i] = <real> istd
        for j in range(d):
            xhat[i, j] = <real> ((x[i, j] - acc) * istd)
            out[i, j] = xhat[i, j] * gain[j] + bias[j]
    return out_arr, xhat_arr, istd_arr


def layer_norm_backward(real[:, ::1] gout, real[:, ::1] xhat, real[::1] inv_std,
                        real[::1] gain):
    cdef Py_ssize_t r = gout.shape[0], d = gout.shape[1]
    cdef Py_ssize_t i, j
    cdef double gy, mean_gy, mean_gy_xhat
    dtype = np.asarray(gout).dtype
    dx_arr = np.empty((r, d), dtype=dtype)
    dgain_arr = np.zeros(d, dtype=dtype)
    dbias_arr = np.zeros(d, dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef real[::1] dgain = dgain_arr
    cdef real[::1] dbias = dbias_arr
    for i in range(r):
        mean_gy = 0.0
        mean_gy_xhat = 0.0
        for j in range(d):
            gy = gout[i, j] * gain[j]
            mean_gy += gy
            mean_gy_xhat += gy * xhat[i, j]
            dgain[j] += gout[i, j] * xhat[i, j]
            dbias[j] += gout[i, j]
        mean_gy /= d
        mean_gy_xhat /= d
        for j in range(d):
            gy = gout[i, j] * gain[j]
            dx[i, j] = <real> (inv_std[i] * (gy - mean_gy - xhat[i, j] * mean_gy_xhat))
    return dx_arr, dgain_arr, dbias_arr


def gelu_forward(real[::1] x):
    """Returns (out, cdf); the cdf is reused by the backward pass."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    cdef double c
    dtype = np.asarray(x).dtype
    out_arr = np.empty(n, dtype=dtype)
    cdf_arr = np.empty(n, dtype=dtype)
    cdef real[::1] out = out_arr
    cdef real[::1] cdf = cdf_arr
    for i in range(n):
        c = 0.5 * (1.0 + erf(x[i] * INV_SQRT2))
        cdf[i] = <real> c
        out[i] = <real> (x[i] * c)
    return out_arr, cdf_arr


def gelu_backward(real[::1] gout, real[::1] x, real[::1] cdf):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i
    cdef double pdf
    dx_arr = np.empty(n, dtype=np.asarray(x).dtype)
    cdef real[::1] dx = dx_arr
    for i in range(n):
        pdf = INV_SQRT_2PI * exp(-0.5 * x[i] * x[i])
        dx[i] = <real> (gout[i] * (cdf[i] + x[i] * pdf))
    return dx_arr


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t r = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, s
    out_arr = np.empty((r, d), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] out = out_arr
    for i in range(r):
        mx = x[i, 0]
        for j in range(1, d):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(d):
            out[i, j] = <real> exp(x[i, j] - mx)
            s += out[i, j]
        for j in range(d):
            out[i, j] = <real> (out[i, j] / s)
    return out_arr


def softmax_backward(real[:, ::1] gout, real[:, ::1] y):
    cdef Py_ssize_t r = gout.shape[0], d = gout.shape[1]
    cdef Py_ssize_t i, j
    cdef double inner
    dx_arr = np.empty((r, d), dtype=np.asarray(gout).dtype)
    cdef real[:, ::1] dx = dx_arr
    for i in range(r):
        inner = 0.0
        for j in range(d):
            inner += gout[i, j] * y[i, j]
        for j in range(d):
            dx[i, j] = <real> ((gout[i, j] - inner) * y[i, j])
    return dx_arr


def adamw_update(real[::1] param, real[::1] grad, real[::1] m, real[::1] v,
                 long t, double lr, double beta1, double beta2, double eps,
                 double weight_decay):
    cdef Py_ssize_t n = param.shape[0]
    cdef Py_ssize_t i
    cdef double bc1 = 1.0 - pow(beta1, t)
    cdef double bc2 = 1.0 - pow(beta2, t)
    cdef double mhat, vhat
    for i in range(n):
        m[i] = <real> (beta1 * m[i] + (1.0 - beta1) * grad[i])
        v[i] = <real> (beta2 * v[i] + (1.0 - beta2) * grad[i] * grad[i])
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        param[i] = <real> (param[i] - lr * (mhat / (sqrt(vhat) + eps)
                                            + weight_decay * param[i]))


def scatter_add_rows(real[:, :, ::1] acc, long[:, ::1] idx, real[:, :, ::1] updates):
    cdef Py_ssize_t b = idx.shape[0], k = idx.shape[1], d = acc.shape[2]
    cdef Py_ssize_t i, j, c
    cdef Py_ssize_t row
    for i in range(b):
        for j in range(k):
            row = idx[i, j]
            for c in range(d):
                acc[i, row, c] += updates[i, j, c]
