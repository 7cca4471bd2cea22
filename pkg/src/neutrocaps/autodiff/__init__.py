"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from . import functional
from .functional import (
    binary_cross_entropy,
    concat_channels,
    conv2d,
    conv_output_size,
    einsum,
    maxpool2d,
    relu,
    sigmoid,
    softmax,
    squash,
    topk_average,
    upsample2d_nearest,
    vector_norm,
)
from .module import Module, he_uniform
from .optim import Adam, adam_step
from .serialize import load_tensors, save_tensors
from .tensor import (
    Tensor,
    debug_mode,
    get_default_dtype,
    no_grad,
    precision,
    set_default_dtype,
    topological_order,
)

__all__ = [
    "Adam",
    "Module",
    "Tensor",
    "adam_step",
    "binary_cross_entropy",
    "concat_channels",
    "conv2d",
    "conv_output_size",
    "debug_mode",
    "einsum",
    "functional",
    "get_default_dtype",
    "he_uniform",
    "load_tensors",
    "maxpool2d",
    "no_grad",
    "precision",
    "relu",
    "save_tensors",
    "set_default_dtype",
    "sigmoid",
    "softmax",
    "squash",
    "topk_average",
    "topological_order",
    "upsample2d_nearest",
    "vector_norm",
]
