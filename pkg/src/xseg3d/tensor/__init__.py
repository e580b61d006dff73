"""Minimal reverse-mode autodiff over dense N C D H W arrays."""
from . import kernels
from .gradcheck import grad_check
from .ops import (
    add,
    batch_norm,
    concat,
    conv3d,
    conv_transpose3d,
    div,
    dropout,
    mean,
    mul,
    neg,
    prelu,
    relu,
    sigmoid,
    sub,
    sum,
)
from .tensor import (
    Gradients,
    Node,
    Tape,
    Tensor,
    active_tape,
    backward,
    default_dtype,
    grad,
    no_record,
    precision,
)

__all__ = [
    "Gradients", "Node", "Tape", "Tensor", "active_tape", "add", "backward",
    "batch_norm", "concat", "conv3d", "conv_transpose3d", "default_dtype", "div",
    "dropout", "grad", "grad_check", "kernels", "mean", "mul", "neg", "no_record",
    "precision", "prelu", "relu", "sigmoid", "sub", "sum",
]
