"""Numeric core: float64 tensors, tape autodiff, row kernels and AdamW."""
from . import kernels
from .optim import OptimizerState, adamw_step
from .tensor import (
    ShapeError,
    Tape,
    count_elements,
    Tensor,
    active_tape,
    add,
    add_n,
    as_tensor,
    concat,
    constants,
    cross_entropy,
    gelu,
    getitem,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    parameters,
    record,
    unbroadcast,
    reshape,
    softmax,
    stack,
    sub,
    sum,
    take,
    transpose,
)

__all__ = [
    "kernels",
    "OptimizerState",
    "adamw_step",
    "ShapeError",
    "Tape",
    "count_elements",
    "Tensor",
    "active_tape",
    "add",
    "add_n",
    "as_tensor",
    "concat",
    "constants",
    "cross_entropy",
    "gelu",
    "getitem",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mul",
    "parameters",
    "record",
    "unbroadcast",
    "reshape",
    "softmax",
    "stack",
    "sub",
    "sum",
    "take",
    "transpose",
]
