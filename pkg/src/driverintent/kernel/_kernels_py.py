"""Pure-numpy implementations of the hot numeric kernels.

Signature-compatible with the compiled core in ``_kernels_c``; backend
selection happens in :mod:`driverintent.kernel.backend`. All arrays are
C-contiguous float64. Matrix products are not here: both backends delegate
those to BLAS through numpy.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu_fwd(x):
    return x * (0.5 * (1.0 + erf(x * _INV_SQRT2)))


def gelu_bwd(x, gout):
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    dens = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return gout * (phi + x * dens)


def softmax_fwd(x):
    # Per-row max shift keeps exp() in range for any logit magnitude.
    shifted = x - x.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    return p


def softmax_bwd(p, gout):
    inner = (gout * p).sum(axis=1, keepdims=True)
    return p * (gout - inner)


def layernorm_fwd(x, gamma, beta, eps):
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_bwd(xhat, rstd, gamma, gout):
    ghat = gout * gamma
    m1 = ghat.mean(axis=1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (ghat - m1 - xhat * m2)
    ggamma = (gout * xhat).sum(axis=0)
    gbeta = gout.sum(axis=0)
    return gx, ggamma, gbeta


def adamw_update(param, grad, m, v, step, lr, wd, beta1, beta2, eps):
    """Adaptive-moment step with decoupled weight decay, in place.

    The decay term is applied to the parameter directly (not through the
    gradient), so a zero-gradient step shrinks weights by exactly
    ``1 - lr*wd``.
    """
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    param -= lr * (mhat / (np.sqrt(vhat) + eps) + wd * param)
