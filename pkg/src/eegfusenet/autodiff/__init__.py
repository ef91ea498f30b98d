from .functional import (
    BatchNormState,
    activation,
    affine,
    avg_pool2d,
    batchnorm2d,
    conv2d,
    conv2d_transpose,
    mse,
)
from .gradcheck import grad_check
from .io import load_tensor, load_tensors, read_tensor, save_tensor, save_tensors, write_tensor
from .optim import Adam, AdamState, adam_step, glorot_init
from .tensor import Tensor, backward, concat, no_grad, stack, where

__all__ = [
    "Adam",
    "AdamState",
    "BatchNormState",
    "Tensor",
    "activation",
    "adam_step",
    "affine",
    "avg_pool2d",
    "backward",
    "batchnorm2d",
    "concat",
    "conv2d",
    "conv2d_transpose",
    "glorot_init",
    "grad_check",
    "load_tensor",
    "load_tensors",
    "mse",
    "no_grad",
    "read_tensor",
    "save_tensor",
    "save_tensors",
    "stack",
    "where",
    "write_tensor",
]
