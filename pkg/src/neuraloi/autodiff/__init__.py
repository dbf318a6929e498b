"""Minimal reverse-mode autodiff over numpy arrays."""
from .adam import AdamState, adam_update
from .nn import (
    PADDING_MODES,
    ConvLSTMCell,
    add_bias,
    conv2d,
    correlate_valid,
    lstm_step,
    pad2d,
    sparse_apply,
)
from .tensor import (
    ContractError,
    DimensionError,
    NonFiniteError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    exp,
    grad,
    inner,
    mul,
    no_record,
    reshape,
    sigmoid,
    square,
    sub,
    sumsq,
    tanh,
    tsum,
    zeros,
)

__all__ = [
    "AdamState",
    "ConvLSTMCell",
    "ContractError",
    "DimensionError",
    "NonFiniteError",
    "PADDING_MODES",
    "Tape",
    "Tensor",
    "adam_update",
    "add",
    "add_bias",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "correlate_valid",
    "exp",
    "grad",
    "inner",
    "lstm_step",
    "mul",
    "no_record",
    "pad2d",
    "reshape",
    "sigmoid",
    "sparse_apply",
    "square",
    "sub",
    "sumsq",
    "tanh",
    "tsum",
    "zeros",
]
