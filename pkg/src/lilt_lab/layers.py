"""Transformer building blocks shared by the towers and the adapters.

Parameters live in a flat ``{path: Tensor}`` mapping; every block here is a
pair of functions, one that lists the parameter shapes under a path prefix
and one that runs the block against the mapping.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T

ParamSchema = dict  # path -> shape tuple


def linear_schema(prefix: str, d_in: int, d_out: int, bias: bool = True) -> ParamSchema:
    out = {f"{prefix}.weight": (d_in, d_out)}
    if bias:
        out[f"{prefix}.bias"] = (d_out,)
    return out


def ln_schema(prefix: str, d: int) -> ParamSchema:
    return {f"{prefix}.gamma": (d,), f"{prefix}.beta": (d,)}


def encoder_layer_schema(prefix: str, hidden: int, mlp_ratio: int) -> ParamSchema:
    """One pre-LN encoder layer: ln1, attention, ln2, two-matrix MLP."""
    s: ParamSchema = {}
    s.update(ln_schema(f"{prefix}.ln1", hidden))
    for name in ("q", "k", "v", "o"):
        s.update(linear_schema(f"{prefix}.attn.{name}", hidden, hidden))
    s.update(ln_schema(f"{prefix}.ln2", hidden))
    s.update(linear_schema(f"{prefix}.mlp.fc1", hidden, hidden * mlp_ratio))
    s.update(linear_schema(f"{prefix}.mlp.fc2", hidden * mlp_ratio, hidden))
    return s


def bottleneck_schema(prefix: str, hidden: int, r: int) -> ParamSchema:
    s = linear_schema(f"{prefix}.down", hidden, r)
    s.update(linear_schema(f"{prefix}.up", r, hidden))
    return s


def linear(params, prefix: str, x: T.Tensor) -> T.Tensor:
    y = T.matmul(x, params[f"{prefix}.weight"])
    b = params.get(f"{prefix}.bias")
    return y if b is None else T.add_bias(y, b)


def ln(params, prefix: str, x: T.Tensor, eps: float) -> T.Tensor:
    return T.layer_norm(x, params[f"{prefix}.gamma"], params[f"{prefix}.beta"], eps)


def bottleneck_forward(params, prefix: str, x: T.Tensor) -> T.Tensor:
    """Residual bottleneck: ``x + up(gelu(down(x)))``."""
    return T.add(x, linear(params, f"{prefix}.up", T.gelu(linear(params, f"{prefix}.down", x))))


def attention(params, prefix: str, h: T.Tensor, heads: int, key_mask: np.ndarray | None) -> T.Tensor:
    b, n, d = h.shape
    dh = d // heads

    def split(t):
        return T.transpose(T.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split(linear(params, f"{prefix}.q", h))
    k = T.transpose(T.reshape(linear(params, f"{prefix}.k", h), (b, n, heads, dh)), (0, 2, 3, 1))
    v = split(linear(params, f"{prefix}.v", h))
    scores = T.scale(T.matmul(q, k), 1.0 / math.sqrt(dh))
    probs = T.softmax(scores, None if key_mask is None else key_mask[:, None, None, :])
    ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, n, d))
    return linear(params, f"{prefix}.o", ctx)


def encoder_layer(params, prefix: str, x: T.Tensor, heads: int, eps: float, key_mask=None, layerwise: bool = False):
    """Pre-LN block; with ``layerwise`` an adapter sits right before each LN."""
    if layerwise:
        x = bottleneck_forward(params, f"{prefix}.adapter1", x)
    x = T.add(x, attention(params, f"{prefix}.attn", ln(params, f"{prefix}.ln1", x, eps), heads, key_mask))
    if layerwise:
        x = bottleneck_forward(params, f"{prefix}.adapter2", x)
    h = ln(params, f"{prefix}.ln2", x, eps)
    return T.add(x, linear(params, f"{prefix}.mlp.fc2", T.gelu(linear(params, f"{prefix}.mlp.fc1", h))))
