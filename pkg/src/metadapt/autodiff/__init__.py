"""Tape-based reverse-mode autodiff with higher-order support."""

from .engine import (
    AutodiffError,
    Tape,
    Tensor,
    backward,
    grad,
    grad_graph,
    is_recording,
    no_grad,
    tape,
)
from .ops import (
    add,
    as_tensor,
    broadcast_to,
    clamp_min,
    constant,
    conv2d,
    conv_out_hw,
    div,
    exp,
    fold,
    leaky_relu,
    log,
    matmul,
    mean,
    mul,
    neg,
    power,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sqrt,
    square,
    sub,
    sum_,
    transpose,
    unfold,
)

__all__ = [
    "AutodiffError",
    "Tape",
    "Tensor",
    "backward",
    "grad",
    "grad_graph",
    "is_recording",
    "no_grad",
    "tape",
    "add",
    "as_tensor",
    "broadcast_to",
    "clamp_min",
    "constant",
    "conv2d",
    "conv_out_hw",
    "div",
    "exp",
    "fold",
    "leaky_relu",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "power",
    "relu",
    "reshape",
    "scale",
    "sigmoid",
    "softmax",
    "sqrt",
    "square",
    "sub",
    "sum_",
    "transpose",
    "unfold",
]
