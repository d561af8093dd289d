"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from .gradcheck import grad_check, numeric_grad, relative_error
from .ops import (
    add,
    as_tensor,
    broadcast_to,
    concat,
    conv3d,
    div,
    elementwise,
    exp,
    instance_norm,
    log,
    log_softmax_channel,
    mean,
    mul,
    neg,
    reduce,
    relu,
    reshape,
    softmax_channel,
    square,
    sub,
    sum,
    transpose,
    upsample_nearest3d,
)
from .tensor import Node, Tensor, backward, is_grad_enabled, no_grad, topological_order

__all__ = [
    "Node", "Tensor", "add", "as_tensor", "backward", "broadcast_to", "concat", "conv3d",
    "div", "elementwise", "exp", "grad_check", "instance_norm", "is_grad_enabled", "log",
    "log_softmax_channel", "mean", "mul", "neg", "no_grad", "numeric_grad", "reduce",
    "relative_error", "relu", "reshape", "softmax_channel", "square", "sub", "sum",
    "topological_order", "transpose", "upsample_nearest3d",
]
