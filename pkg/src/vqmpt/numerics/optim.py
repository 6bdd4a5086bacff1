"""Adam with bias correction, the inverse-sqrt warmup schedule, and norm clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigurationError, DimensionError, DomainError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    epsilon: float = 1e-9
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigurationError("Adam betas must lie in (0, 1)")
        if self.epsilon <= 0:
            raise ConfigurationError("Adam epsilon must be positive")


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update in place on ``params[k].data``.

    Parameters without an entry in ``grads`` are left untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        g64 = g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.data.shape)
            v = np.zeros(p.data.shape)
        m = b1 * m + (1.0 - b1) * g64
        v = b2 * v + (1.0 - b2) * g64 * g64
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data.astype(np.float64) - update).astype(p.data.dtype)


def clip_grad_norm(grads: dict, max_norm: float = 1.0) -> float:
    """Rescale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(np.sum(g.astype(np.float64) ** 2) for g in grads.values())))
    if total > max_norm:
        scale = max_norm / total
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return total


@dataclass(frozen=True)
class LRSchedule:
    """lr = d^-0.5 * min(step^-0.5, step * warmup^-1.5)."""

    model_dim: int
    warmup_steps: int = 400
    scale: float = 1.0

    def __post_init__(self):
        if self.model_dim < 1 or self.warmup_steps < 1:
            raise ConfigurationError("model_dim and warmup_steps must be positive")


def lr_at(schedule: LRSchedule, step: int) -> float:
    if step < 1:
        raise DomainError(f"learning-rate step must be >= 1, got {step}")
    return schedule.scale * schedule.model_dim ** -0.5 * min(
        step ** -0.5, step * schedule.warmup_steps ** -1.5)
