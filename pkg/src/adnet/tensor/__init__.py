"""Minimal NCHW tensor library with reverse-mode autodiff."""

from adnet.tensor.functional import (
    conv2d,
    depth_to_space,
    gelu,
    l1_loss,
    l2_normalize,
    layer_norm,
    mse_loss,
    simple_gate,
    softmax_lastdim,
    space_to_depth,
)
from adnet.tensor.gradcheck import GradCheckResult, grad_check
from adnet.tensor.optim import AdamW, LrSchedule, OptimizerState, adamw_step, cosine_lr
from adnet.tensor.tensor import (
    Tensor,
    concatenate,
    matmul,
    maximum_over,
    no_grad,
    pad2d,
    tensor,
)

__all__ = [
    "AdamW", "GradCheckResult", "LrSchedule", "OptimizerState", "Tensor", "adamw_step", "concatenate",
    "conv2d", "cosine_lr", "depth_to_space", "gelu", "grad_check", "l1_loss", "l2_normalize", "layer_norm",
    "matmul", "maximum_over", "mse_loss", "no_grad", "pad2d", "simple_gate", "softmax_lastdim",
    "space_to_depth", "tensor",
]
