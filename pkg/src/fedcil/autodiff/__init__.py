"""Minimal reverse-mode autodiff over dense float64 arrays."""
from .gradcheck import check_gradients, numeric_gradient, relative_error
from .kernels import BACKEND
from .optim import Adam
from .tensor import (
    EPS,
    Tape,
    Tensor,
    add,
    backward,
    bernoulli,
    binary_cross_entropy,
    concat,
    constant,
    cross_entropy,
    detach,
    gather_rows,
    gaussian,
    kl_divergence,
    leaky_relu,
    linear,
    matmul,
    mean,
    mul,
    one_hot,
    rows,
    scalar_mul,
    select_columns,
    sigmoid,
    softmax,
    squared_distance,
    sub,
    sum,
    sum_all,
    tanh,
)

__all__ = [
    "BACKEND", "EPS", "Adam", "Tape", "Tensor", "add", "backward", "bernoulli",
    "binary_cross_entropy", "check_gradients", "concat", "constant",
    "cross_entropy", "detach", "gather_rows", "gaussian", "kl_divergence",
    "leaky_relu", "linear", "matmul", "mean", "mul", "numeric_gradient",
    "one_hot", "relative_error", "rows", "scalar_mul", "select_columns",
    "sigmoid", "softmax", "squared_distance", "sub", "sum", "sum_all", "tanh",
]
