from .conv import ConvConfigError, conv2d, conv2d_nhwc, conv_output_size
from .gradcheck import GradCheckReport, grad_check, numerical_grad, rel_error
from .optim import OptimizerState, adam_step
from .tensor import (
    ContractError,
    DimensionError,
    NonFiniteError,
    Tensor,
    add,
    as_tensor,
    concat,
    default_dtype,
    get_default_dtype,
    index,
    log_softmax,
    matmul,
    max_over_axis,
    mean,
    mul,
    mul_scalar,
    relu,
    reshape,
    set_default_dtype,
    softmax_rows,
    square,
    sub,
    sum,
    transpose,
    vector_norm,
    where,
)

__all__ = [
    "ContractError", "ConvConfigError", "DimensionError", "GradCheckReport", "NonFiniteError",
    "OptimizerState", "Tensor", "adam_step", "add", "as_tensor", "concat", "conv2d", "conv2d_nhwc",
    "conv_output_size", "default_dtype", "get_default_dtype", "grad_check", "index",
    "log_softmax", "matmul", "max_over_axis", "mean", "mul", "mul_scalar", "numerical_grad",
    "rel_error", "relu", "reshape", "set_default_dtype", "softmax_rows", "square", "sub",
    "sum", "transpose", "vector_norm", "where",
]
