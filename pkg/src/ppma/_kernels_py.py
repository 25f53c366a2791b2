"""Pure numpy implementations of the hot kernels.

Signature-compatible with the compiled `ppma._kernels` extension; the active
implementation is chosen once in `ppma.backend`. All 2-D kernels expect
C-contiguous arrays with the normalized axis last.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def layer_norm_forward(x, gain, bias, eps):
    """x: (R, D). Returns (out, xhat, inv_std) with inv_std shaped (R,)."""
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain + bias
    return out, xhat, inv_std[:, 0]


def layer_norm_backward(gout, xhat, inv_std, gain):
    """Returns (dx, dgain, dbias) for the fused forward above."""
    d = xhat.shape[1]
    gy = gout * gain
    mean_gy = gy.mean(axis=1, keepdims=True)
    mean_gy_xhat = np.mean(gy * xhat, axis=1, keepdims=True)
    dx = inv_std[:, None] * (gy - mean_gy - xhat * mean_gy_xhat)
    dgain = np.sum(gout * xhat, axis=0)
    dbias = np.sum(gout, axis=0)
    return dx, dgain, dbias


def gelu_forward(x):
    """Returns (out, cdf); the cdf is reused by the backward pass."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, cdf


def gelu_backward(gout, x, cdf):
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return gout * (cdf + x * pdf)


def softmax_forward(x):
    """x: (R, D); softmax along the last axis, stabilized by max subtraction."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(gout, y):
    inner = np.sum(gout * y, axis=1, keepdims=True)
    return (gout - inner) * y


def adamw_update(param, grad, m, v, t, lr, beta1, beta2, eps, weight_decay):
    """In-place decoupled-decay Adam step; t is the already-incremented count."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * param)


def scatter_add_rows(acc, idx, updates):
    """acc[b, idx[b, k], :] += updates[b, k, :] (duplicate indices accumulate)."""
    b, k = idx.shape
    rows = np.repeat(np.arange(b), k)
    np.add.at(acc, (rows, idx.reshape(-1)), updates.reshape(b * k, -1))
