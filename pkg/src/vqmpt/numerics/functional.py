"""Differentiable layers built on :mod:`vqmpt.numerics.tensor`.

Parameters live in a flat ``dict[str, Tensor]``; each layer reads the
entries under a name prefix (``f"{prefix}.W"``, ``f"{prefix}.b"``, ...).
Linear maps are stored input-major, so a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from ..exceptions import ConfigurationError, DegenerateInputError, DimensionError, PositiveDefinitenessError
from . import tensor as T
from .tensor import Tensor

LAYERNORM_EPS = 1e-5
LOG_2PI = math.log(2.0 * math.pi)

Params = Mapping[str, Tensor]


def matmul(a, b) -> Tensor:
    return T.matmul(a, b)


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax. ``mask`` (broadcastable, True = keep) zeroes entries exactly."""
    x = T.as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data.astype(np.float64)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        z = np.where(mask, z, -np.inf)
    peak = np.max(z, axis=axis, keepdims=True)
    peak = np.where(np.isfinite(peak), peak, 0.0)
    e = np.exp(z - peak)
    total = e.sum(axis=axis, keepdims=True)
    y = (e / np.where(total > 0, total, 1.0)).astype(x.dtype)

    def backward(g):
        inner = np.sum(g.astype(np.float64) * y, axis=axis, keepdims=True)
        return ((y * (g - inner)).astype(x.dtype),)

    return Tensor._make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = T.as_tensor(x)
    z = x.data.astype(np.float64)
    peak = np.max(z, axis=axis, keepdims=True)
    lse = peak + np.log(np.exp(z - peak).sum(axis=axis, keepdims=True))
    out = (z - lse).astype(x.dtype)
    prob = np.exp(z - lse)

    def backward(g):
        total = np.sum(g.astype(np.float64), axis=axis, keepdims=True)
        return ((g - prob * total).astype(x.dtype),)

    return Tensor._make(out, (x,), backward)


def layernorm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
              eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then apply ``gamma``/``beta``."""
    x = T.as_tensor(x)
    z = x.data.astype(np.float64)
    mu = z.mean(axis=-1, keepdims=True)
    var = ((z - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (z - mu) * inv
    n = z.shape[-1]

    def backward(g):
        g = g.astype(np.float64)
        gx = inv / n * (n * g - g.sum(axis=-1, keepdims=True)
                        - xhat * (g * xhat).sum(axis=-1, keepdims=True))
        return (gx.astype(x.dtype),)

    out = Tensor._make(xhat.astype(x.dtype), (x,), backward)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def softplus(x: Tensor) -> Tensor:
    return T.softplus(T.as_tensor(x))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit Euclidean length."""
    x = T.as_tensor(x)
    norms = np.sqrt(np.sum(x.data.astype(np.float64) ** 2, axis=axis, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("cannot l2-normalize a zero vector")
    norm = T.sqrt(T.tsum(x * x, axis=axis, keepdims=True))
    return x / norm


def linear(x: Tensor, params: Params, prefix: str) -> Tensor:
    out = T.matmul(x, params[f"{prefix}.W"])
    bias = params.get(f"{prefix}.b")
    return out if bias is None else out + bias


def mlp(x: Tensor, params: Params, prefix: str) -> Tensor:
    """Two-layer GELU perceptron ``fc1 -> gelu -> fc2``."""
    return linear(T.gelu(linear(x, params, f"{prefix}.fc1")), params, f"{prefix}.fc2")


def attention(Q: Tensor, K: Tensor, V: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_v)) V over the last two axes.

    ``mask[i, j]`` True means query ``i`` may attend to key ``j``.
    """
    Q, K, V = T.as_tensor(Q), T.as_tensor(K), T.as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query/key widths differ: Q{Q.shape} K{K.shape}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"key/value lengths differ: K{K.shape} V{V.shape}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != (Q.shape[-2], K.shape[-2]):
            raise DimensionError(f"mask {mask.shape} does not match scores ({Q.shape[-2]}, {K.shape[-2]})")
    gamma = math.sqrt(V.shape[-1])
    scores = T.matmul(Q, K.swapaxes(-1, -2)) * (1.0 / gamma)
    return T.matmul(softmax(scores, axis=-1, mask=mask), V)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    return x.reshape(*lead, n, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, n, h * dh)


def multi_head_attention(xq: Tensor, xkv: Tensor, params: Params, prefix: str, heads: int,
                         mask: np.ndarray | None = None) -> Tensor:
    """Project, split into ``heads``, attend per head, concatenate, project out."""
    d = xq.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"model dim {d} is not divisible by {heads} heads")
    q = _split_heads(linear(xq, params, f"{prefix}.q"), heads)
    k = _split_heads(linear(xkv, params, f"{prefix}.k"), heads)
    v = _split_heads(linear(xkv, params, f"{prefix}.v"), heads)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        # (..., n_q, n_k) -> (..., 1, n_q, n_k) to broadcast over heads
        mask = mask[..., None, :, :]
    return linear(_merge_heads(attention(q, k, v, mask)), params, f"{prefix}.o")


def prenorm_block(x: Tensor, params: Params, prefix: str, heads: int,
                  mask: np.ndarray | None = None, context: Tensor | None = None) -> Tensor:
    """x + Attn(LN(x)), then + MLP(LN(.)).

    With ``context`` the attention is cross-attention: queries from ``x``,
    keys/values from the separately normalized ``context``.
    """
    h = layernorm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    if context is None:
        kv = h
    else:
        kv = layernorm(context, params[f"{prefix}.lnc.g"], params[f"{prefix}.lnc.b"])
    x = x + multi_head_attention(h, kv, params, f"{prefix}.attn", heads, mask)
    h = layernorm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    return x + mlp(h, params, f"{prefix}.mlp")


def gaussian_nll(q, mu: Tensor, L: Tensor, D: Tensor) -> Tensor:
    """-log N(q; mu, L diag(D) L^T) from the unit-lower-triangular factors.

    Batched over leading axes. The log-determinant is ``sum(log D)`` and the
    Mahalanobis term comes from forward substitution ``L y = q - mu``.
    """
    mu, L, D = T.as_tensor(mu), T.as_tensor(L), T.as_tensor(D)
    if np.any(D.data <= 0):
        raise PositiveDefinitenessError("diagonal factor D must be strictly positive")
    r = T.as_tensor(q, dtype=mu.dtype) - mu if not isinstance(q, Tensor) else q - mu
    n = mu.shape[-1]
    ys: list[Tensor] = []
    for i in range(n):
        yi = r[..., i]
        for k in range(i):
            yi = yi - L[..., i, k] * ys[k]
        ys.append(yi)
    maha = None
    for i in range(n):
        term = ys[i] * ys[i] / D[..., i]
        maha = term if maha is None else maha + term
    logdet = T.tsum(T.log(D), axis=-1)
    return (maha + logdet + n * LOG_2PI) * 0.5
