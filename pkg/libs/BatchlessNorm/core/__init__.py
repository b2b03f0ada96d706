"""Dense tensor engine with a recorded tape and reverse-mode differentiation."""

from .ops import (
    add,
    conv2d,
    div,
    elementwise,
    exp,
    isrlu,
    leaky_relu,
    log,
    matmul,
    maxpool2d,
    mean_all,
    mul,
    reduce,
    reshape,
    scale,
    softmax,
    softmax_cross_entropy,
    stop_gradient,
    sub,
    sum_all,
)
from .tape import GradientMap, Tape, Tensor, active_tape, backward, parameter

__all__ = [
    "GradientMap",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "conv2d",
    "div",
    "elementwise",
    "exp",
    "isrlu",
    "leaky_relu",
    "log",
    "matmul",
    "maxpool2d",
    "mean_all",
    "mul",
    "parameter",
    "reduce",
    "reshape",
    "scale",
    "softmax",
    "softmax_cross_entropy",
    "stop_gradient",
    "sub",
    "sum_all",
]
