"""Minimal dense-tensor kernel with reverse-mode differentiation."""
from . import backend, ptn
from .tensor import (
    ShapeError,
    StopGradientTape,
    Tensor,
    absolute,
    add,
    as_tensor,
    concat,
    conv2d,
    cross_entropy,
    discrete_choice,
    div,
    grad,
    index,
    leaky_relu,
    linear,
    log_softmax,
    matmul,
    mean,
    mean_abs_error,
    mul,
    replay_stop_gradients,
    reshape,
    softmax,
    sqrt,
    square,
    stop_gradient,
    straight_through,
    sub,
    transpose,
    tsum,
)
from .optim import Adam
from .gradcheck import finite_difference_grads, max_relative_error

__all__ = [
    "Adam", "ShapeError", "StopGradientTape", "Tensor", "absolute", "add", "as_tensor",
    "backend", "concat", "conv2d", "cross_entropy", "discrete_choice", "div",
    "finite_difference_grads", "grad", "index", "leaky_relu", "linear", "log_softmax",
    "matmul", "max_relative_error", "mean", "mean_abs_error", "mul", "ptn",
    "replay_stop_gradients", "reshape", "softmax", "sqrt", "square", "stop_gradient",
    "straight_through", "sub", "transpose", "tsum",
]
