"""Minimal reverse-mode autodiff over numpy arrays plus Adam."""
from .ops import (
    OPS, add, cast, concat, cosine_similarity, div, exp, forward_op, layer_norm, log,
    logsumexp, matmul, max, mean, mul, relu, reshape, scale, sigmoid, slice,
    softmax, softplus, sub, sum, swap_last, take_along, transpose,
)
from .optim import AdamState, adam_step, exp_decay_factor, init_adam
from .tensor import (
    Graph, GraphError, Tensor, as_tensor, backward, current_graph, default_dtype,
    get_dtype, make_op, no_grad,
)

__all__ = [
    "OPS", "AdamState", "Graph", "GraphError", "Tensor", "adam_step", "add",
    "as_tensor", "backward", "cast", "concat", "cosine_similarity", "current_graph",
    "default_dtype", "div", "exp", "exp_decay_factor", "forward_op", "get_dtype",
    "init_adam", "layer_norm", "log", "logsumexp", "make_op", "matmul", "max",
    "mean", "mul", "no_grad", "relu", "reshape", "scale", "sigmoid", "slice",
    "softmax", "softplus", "sub", "sum", "swap_last", "take_along", "transpose",
]
