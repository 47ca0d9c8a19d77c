from .core import (
    Tensor,
    activation,
    add,
    amax,
    as_tensor,
    backward,
    clip,
    concat,
    div,
    exp,
    inject_sign_flip,
    is_grad_enabled,
    linear,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    square,
    sub,
    sum_,
    transpose,
)
from .functional import (
    ConvSpec,
    batch_norm,
    conv2d,
    dropout,
    layer_norm,
    pool2d,
    softmax,
    transpose_conv2d,
)
from .rng import Rng

__all__ = [
    "ConvSpec", "Rng", "Tensor", "activation", "add", "amax", "as_tensor", "backward",
    "batch_norm", "clip", "concat", "conv2d", "div", "dropout", "exp", "inject_sign_flip",
    "is_grad_enabled", "layer_norm", "linear", "log", "matmul", "mean", "mul", "no_grad",
    "pool2d", "relu", "reshape", "sigmoid", "softmax", "square", "sub", "sum_", "transpose",
    "transpose_conv2d",
]
