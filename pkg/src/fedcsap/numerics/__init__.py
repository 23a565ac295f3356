"""Minimal dense-tensor algebra with reverse-mode autodiff and an FD oracle."""

from .check import finite_diff_check, finite_diff_check_blocks
from .ops import (
    absolute,
    add,
    add_rowvec,
    as_tensor,
    concat,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_cols,
    softmax,
    sub,
    transpose,
)
from .params import ParameterStore, sgd_step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    active_tape,
    backward,
    backward_fault,
    no_grad,
    set_finiteness_checks,
)

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "ShapeError",
    "NonFiniteError",
    "ParameterStore",
    "active_tape",
    "as_tensor",
    "backward",
    "backward_fault",
    "no_grad",
    "set_finiteness_checks",
    "sgd_step",
    "finite_diff_check",
    "finite_diff_check_blocks",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "absolute",
    "reshape",
    "concat",
    "slice_cols",
    "add_rowvec",
    "reduce_sum",
    "reduce_mean",
    "softmax",
    "log_softmax",
    "layer_norm",
    "l2_normalize",
]
