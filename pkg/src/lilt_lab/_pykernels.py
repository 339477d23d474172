"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``."""

from __future__ import annotations

import numpy as np

try:
    from scipy.special import erf as _erf
except ImportError:  # pragma: no cover - scipy is a declared dependency
    _erf = None

GELU_VARIANT = "erf" if _erf is not None else "tanh"

_SQRT_2_OVER_PI = np.sqrt(2.0 / np.pi)


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True, dtype=np.float64)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True, dtype=np.float64)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (centered * rstd).astype(x.dtype)
    y = gamma * xhat + beta
    return y.astype(x.dtype, copy=False), xhat, rstd[:, 0].astype(x.dtype)


def layer_norm_bwd(gy, xhat, rstd, gamma):
    g = gy * gamma
    d = gy.shape[1]
    s1 = g.sum(axis=1, keepdims=True, dtype=np.float64) / d
    s2 = (g * xhat).sum(axis=1, keepdims=True, dtype=np.float64) / d
    gx = rstd[:, None] * (g - s1 - xhat * s2)
    ggamma = (gy * xhat).sum(axis=0, dtype=np.float64)
    gbeta = gy.sum(axis=0, dtype=np.float64)
    dt = gy.dtype
    return gx.astype(dt), ggamma.astype(dt), gbeta.astype(dt)


def gelu_fwd(x):
    if _erf is not None:
        return (0.5 * x * (1.0 + _erf(x / np.sqrt(2.0)))).astype(x.dtype, copy=False)
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    return (0.5 * x * (1.0 + np.tanh(inner))).astype(x.dtype, copy=False)


def gelu_bwd(x, gy):
    if _erf is not None:
        cdf = 0.5 * (1.0 + _erf(x / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return (gy * (cdf + x * pdf)).astype(x.dtype, copy=False)
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
    grad = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
    return (gy * grad).astype(x.dtype, copy=False)


def softmax_fwd(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(p, gp):
    dot = (gp * p).sum(axis=1, keepdims=True)
    return p * (gp - dot)


def match_ranks(sim, target):
    rows = np.arange(sim.shape[0])
    s = sim[rows, target][:, None]
    cols = np.arange(sim.shape[1])[None, :]
    ahead = (sim > s) | ((sim == s) & (cols < target[:, None]))
    return ahead.sum(axis=1).astype(np.int64) + 1
