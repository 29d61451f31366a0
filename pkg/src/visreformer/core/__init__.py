from .ops import (
    concat,
    conv2d,
    cross_entropy,
    gather_rows,
    l2_normalize,
    layer_norm,
    linear,
    matmul,
    softmax_rows,
    stable_sort_with_permutation,
)
from .rng import RngStream
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    backward_from,
    enable_grad,
    finite_checks,
    grad_enabled,
    no_grad,
    parameter,
)
from .module import Module, param_count

__all__ = [
    "Module",
    "RngStream",
    "Tensor",
    "as_tensor",
    "backward",
    "backward_from",
    "concat",
    "enable_grad",
    "conv2d",
    "cross_entropy",
    "finite_checks",
    "gather_rows",
    "grad_enabled",
    "l2_normalize",
    "layer_norm",
    "linear",
    "matmul",
    "no_grad",
    "param_count",
    "parameter",
    "softmax_rows",
    "stable_sort_with_permutation",
]
