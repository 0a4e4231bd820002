"""Minimal f64 tensor engine with reverse-mode autodiff."""

from . import functional, kernels
from .functional import conv2d, dropout, l2_normalize, layernorm, linear, logsumexp, sinkhorn, softmax
from .params import Parameter, ParameterStore, adam_step, adamw_step
from .tensor import (
    Tensor,
    add,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    exp,
    gelu,
    grad_enabled,
    index,
    log,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    swapaxes,
    take,
    transpose,
    tsum,
)

__all__ = [
    "Parameter", "ParameterStore", "Tensor", "add", "adam_step", "adamw_step", "as_tensor",
    "backward", "broadcast_to", "concat", "conv2d", "dropout", "exp", "functional", "gelu", "grad_enabled",
    "index", "kernels", "l2_normalize", "layernorm", "linear", "log", "logsumexp", "matmul", "mean",
    "mul", "neg", "no_grad", "relu", "reshape", "sinkhorn", "softmax", "swapaxes", "take",
    "transpose", "tsum",
]
