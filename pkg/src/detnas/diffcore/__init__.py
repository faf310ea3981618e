"""Minimal reverse-mode tensor engine used by the supernet."""

from detnas.diffcore.gradcheck import gradcheck
from detnas.diffcore.ops import (
    add,
    clip,
    concat_channels,
    conv2d,
    conv_output_size,
    exp,
    getitem,
    log,
    log_softmax,
    matmul,
    maxpool2d,
    mean,
    mul,
    pad_channels,
    reshape,
    scale,
    sigmoid,
    silu,
    slice_channels,
    softmax,
    space_to_depth,
    square,
    sub,
    sum,
    upsample_nearest2x,
)
from detnas.diffcore.tensor import (
    ComputeNode,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    grad_enabled,
    make_result,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "ComputeNode", "Tensor", "add", "as_tensor", "backward", "clip", "concat_channels",
    "conv2d", "conv_output_size", "default_dtype", "exp", "getitem", "grad_enabled",
    "gradcheck", "log", "log_softmax", "make_result", "matmul", "maxpool2d", "mean", "mul",
    "no_grad", "pad_channels", "precision", "reshape", "scale", "set_default_dtype",
    "sigmoid", "silu", "slice_channels", "softmax", "space_to_depth", "square", "sub",
    "sum", "upsample_nearest2x",
]
