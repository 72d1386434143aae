"""Autodiff core: tensors, ops, backward pass, Adam, containers."""

from .container import ContainerError, read_container, write_container
from .gradcheck import finite_diff_gradient, numeric_jacobian
from .optim import ParamStore, adam_step, clip_grad_norm
from .rng import make_rng, split
from .tensor import (
    OP_KINDS,
    Graph,
    GraphError,
    NonFiniteError,
    Tensor,
    as_tensor,
    backward,
    build_op,
    grad,
    no_grad,
    stop_gradient,
)

__all__ = [
    "OP_KINDS", "ContainerError", "Graph", "GraphError", "NonFiniteError",
    "ParamStore", "Tensor", "adam_step", "as_tensor", "backward", "build_op",
    "clip_grad_norm", "finite_diff_gradient", "grad", "make_rng",
    "no_grad", "numeric_jacobian", "read_container", "split", "stop_gradient",
    "write_container",
]
