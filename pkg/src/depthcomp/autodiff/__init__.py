"""Minimal rank-4 tensor library with reverse-mode automatic differentiation."""

from . import functional
from .functional import (
    bce_with_logits,
    concat,
    conv2d,
    conv2d_transpose,
    grid_sample_bilinear,
    instance_norm,
    leaky_relu,
    mean,
    relu,
    sigmoid,
    tanh,
)
from .gradcheck import GradCheckReport, OpCheck, grad_check, run_grad_checks
from .tensor import DTYPE, Tape, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "DTYPE",
    "GradCheckReport",
    "OpCheck",
    "Tape",
    "Tensor",
    "backward",
    "bce_with_logits",
    "concat",
    "conv2d",
    "conv2d_transpose",
    "functional",
    "grad_check",
    "grid_sample_bilinear",
    "instance_norm",
    "is_grad_enabled",
    "leaky_relu",
    "mean",
    "no_grad",
    "relu",
    "run_grad_checks",
    "sigmoid",
    "tanh",
]
