"""Reverse-mode autodiff with second-order support, RNG streams, checkpoints."""
from .params import ParamStore
from .rng import RngStream, rng_draw
from .tensor import (Graph, Tensor, as_tensor, backward, concat, constant, exp,
                     getitem, log, log_softmax, matmul, mean, mul, no_record,
                     op_kernel, relu, reshape, scale, second_order_grad,
                     sigmoid, softmax, stack, sub, tanh, transpose)
from .tensor import sum as tsum


def rel_err(a, b):
    """Elementwise ``|a - b| / max(1e-8, |a|, |b|)``."""
    import numpy as np
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b)))


__all__ = [
    "ParamStore", "RngStream", "rng_draw", "Graph", "Tensor", "as_tensor",
    "backward", "concat", "constant", "exp", "getitem", "log", "log_softmax",
    "matmul", "mean", "mul", "no_record", "op_kernel", "relu", "reshape",
    "scale", "second_order_grad", "sigmoid", "softmax", "stack", "sub",
    "tanh", "transpose", "tsum", "rel_err",
]
