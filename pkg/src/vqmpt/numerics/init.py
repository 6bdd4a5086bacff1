"""Parameter initialization for the layer layouts in :mod:`.functional`."""

from __future__ import annotations

import numpy as np

from .tensor import DEFAULT_DTYPE, Tensor


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def add_linear(params: dict, rng, prefix: str, fan_in: int, fan_out: int, bias: bool = True,
               dtype=DEFAULT_DTYPE) -> None:
    params[f"{prefix}.W"] = Tensor(xavier_uniform(rng, fan_in, fan_out, dtype), requires_grad=True)
    if bias:
        params[f"{prefix}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)


def add_layernorm(params: dict, prefix: str, dim: int, dtype=DEFAULT_DTYPE) -> None:
    params[f"{prefix}.g"] = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)


def add_mlp(params: dict, rng, prefix: str, dim: int, hidden: int, dtype=DEFAULT_DTYPE) -> None:
    add_linear(params, rng, f"{prefix}.fc1", dim, hidden, dtype=dtype)
    add_linear(params, rng, f"{prefix}.fc2", hidden, dim, dtype=dtype)


def add_attention(params: dict, rng, prefix: str, dim: int, dtype=DEFAULT_DTYPE) -> None:
    for name in ("q", "k", "v", "o"):
        add_linear(params, rng, f"{prefix}.{name}", dim, dim, dtype=dtype)


def add_prenorm_block(params: dict, rng, prefix: str, dim: int, mlp_ratio: int = 2,
                      cross: bool = False, dtype=DEFAULT_DTYPE) -> None:
    add_layernorm(params, f"{prefix}.ln1", dim, dtype)
    if cross:
        add_layernorm(params, f"{prefix}.lnc", dim, dtype)
    add_attention(params, rng, f"{prefix}.attn", dim, dtype)
    add_layernorm(params, f"{prefix}.ln2", dim, dtype)
    add_mlp(params, rng, f"{prefix}.mlp", dim, mlp_ratio * dim, dtype)


def sinusoidal_encoding(length: int, dim: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Fixed sine/cosine position table of shape (length, dim)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, dim, 2, dtype=np.float64) / dim))
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return table.astype(dtype)


def cast_params(params: dict, dtype) -> dict:
    """Fresh leaf tensors with the same values in ``dtype``."""
    return {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in params.items()}
