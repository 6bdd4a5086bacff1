"""Minimal reverse-mode autodiff core: tensors, transformer layers, losses, Adam."""

from .functional import (
    attention,
    gaussian_nll,
    l2_normalize,
    layernorm,
    linear,
    log_softmax,
    matmul,
    mlp,
    multi_head_attention,
    prenorm_block,
    softmax,
    softplus,
)
from .gradcheck import gradcheck, numerical_grad, relative_error
from .optim import AdamState, LRSchedule, adam_step, clip_grad_norm, lr_at
from .tensor import Tensor, as_tensor, concat, stack, stop_gradient, straight_through

__all__ = [
    "AdamState",
    "LRSchedule",
    "Tensor",
    "adam_step",
    "as_tensor",
    "attention",
    "clip_grad_norm",
    "concat",
    "gaussian_nll",
    "gradcheck",
    "l2_normalize",
    "layernorm",
    "linear",
    "log_softmax",
    "lr_at",
    "matmul",
    "mlp",
    "multi_head_attention",
    "numerical_grad",
    "prenorm_block",
    "relative_error",
    "softmax",
    "softplus",
    "stack",
    "stop_gradient",
    "straight_through",
]
