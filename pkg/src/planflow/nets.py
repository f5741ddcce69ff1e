"""Shared transformer plumbing for the planner and renderer: parameter init,
attention/MLP blocks over the numerics primitives, and sinusoidal time features.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import (
    DimensionError,
    Rng,
    Tensor,
    add,
    concat,
    gelu,
    layernorm,
    matmul,
    mul,
    narrow,
    rotate_pairs,
    softmax_rows,
    transpose,
)


def weight(rng: Rng, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    return Tensor(rng.normal((fan_in, fan_out)) * (gain / math.sqrt(fan_in)), requires_grad=True)


def normal_param(rng: Rng, shape, std: float) -> Tensor:
    return Tensor(rng.normal(shape) * std, requires_grad=True)


def zeros_param(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def ln(params: dict, prefix: str, x: Tensor) -> Tensor:
    return layernorm(x, params[prefix + "g"], params[prefix + "b"])


def mlp(params: dict, prefix: str, x: Tensor) -> Tensor:
    h = add(matmul(x, params[prefix + "w1"]), params[prefix + "b1"])
    return add(matmul(gelu(h), params[prefix + "w2"]), params[prefix + "b2"])


def self_attention(
    params: dict,
    prefix: str,
    x: Tensor,
    heads: int,
    bias: np.ndarray | None = None,
    angles: np.ndarray | None = None,
) -> Tensor:
    """Multi-head attention with optional additive mask bias and rotary phases.

    `angles` has shape (n, head_dim/2) and is shared across heads; a fully
    banned key column gets softmax weight exactly 0 (the bias underflows).
    """
    n, d = x.shape
    if d % heads:
        raise DimensionError(f"hidden dim {d} not divisible by {heads} heads")
    hd = d // heads
    q = matmul(x, params[prefix + "wq"])
    k = matmul(x, params[prefix + "wk"])
    v = matmul(x, params[prefix + "wv"])
    scale = 1.0 / math.sqrt(hd)
    outs = []
    for h in range(heads):
        qh = narrow(q, 1, h * hd, hd)
        kh = narrow(k, 1, h * hd, hd)
        vh = narrow(v, 1, h * hd, hd)
        if angles is not None:
            qh = rotate_pairs(qh, angles)
            kh = rotate_pairs(kh, angles)
        logits = mul(matmul(qh, transpose(kh)), scale)
        if bias is not None:
            logits = add(logits, bias)
        outs.append(matmul(softmax_rows(logits), vh))
    merged = outs[0] if len(outs) == 1 else concat(outs, axis=1)
    return matmul(merged, params[prefix + "wo"])


def cross_attention(params: dict, prefix: str, x: Tensor, cond: Tensor, heads: int) -> Tensor:
    """Queries from the token stream, keys/values from the conditioning stream."""
    n, d = x.shape
    hd = d // heads
    q = matmul(x, params[prefix + "cq"])
    k = matmul(cond, params[prefix + "ck"])
    v = matmul(cond, params[prefix + "cv"])
    scale = 1.0 / math.sqrt(hd)
    outs = []
    for h in range(heads):
        qh = narrow(q, 1, h * hd, hd)
        kh = narrow(k, 1, h * hd, hd)
        vh = narrow(v, 1, h * hd, hd)
        logits = mul(matmul(qh, transpose(kh)), scale)
        outs.append(matmul(softmax_rows(logits), vh))
    merged = outs[0] if len(outs) == 1 else concat(outs, axis=1)
    return matmul(merged, params[prefix + "co"])


def time_features(t, dim: int) -> np.ndarray:
    """Sinusoidal features of t in [0, 1]; constant wrt the tape."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * 1000.0
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def time_embedding(params: dict, prefix: str, t, dim_features: int) -> Tensor:
    feats = Tensor(time_features(t, dim_features))
    h = add(matmul(feats, params[prefix + "w1"]), params[prefix + "b1"])
    return add(matmul(gelu(h), params[prefix + "w2"]), params[prefix + "b2"])
