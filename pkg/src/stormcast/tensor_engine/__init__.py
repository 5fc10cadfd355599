"""Dense tensors with reverse-mode autodiff on an operation tape."""

from .ops import (
    abs_,
    add,
    concat,
    conv2d,
    conv_transpose2d,
    elementwise,
    leaky_relu,
    mean,
    mul,
    relu,
    scale,
    sigmoid,
    slice_axis,
    softplus,
    sub,
    sum_,
    tanh,
)
from .tensor import (
    GradientTable,
    Tape,
    Tensor,
    backward,
    current_tape,
    default_dtype,
    set_default_dtype,
    set_finite_checks,
    using_dtype,
)

ComputationTape = Tape

__all__ = [
    "ComputationTape",
    "GradientTable",
    "Tape",
    "Tensor",
    "abs_",
    "add",
    "backward",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "current_tape",
    "default_dtype",
    "elementwise",
    "leaky_relu",
    "mean",
    "mul",
    "relu",
    "scale",
    "set_default_dtype",
    "set_finite_checks",
    "sigmoid",
    "slice_axis",
    "softplus",
    "sub",
    "sum_",
    "tanh",
    "using_dtype",
]
