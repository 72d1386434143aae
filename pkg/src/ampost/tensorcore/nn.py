"""Dense multilayer perceptrons on top of :mod:`tensor`."""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .optim import ParamStore

ACTIVATIONS: dict[str, Callable[[T.Tensor], T.Tensor]] = {
    "tanh": T.tanh,
    "relu": T.relu,
}


def init_mlp(
    store: ParamStore,
    prefix: str,
    sizes: Sequence[int],
    rng: np.random.Generator,
    zero_last: bool = False,
) -> None:
    """Register weights ``{prefix}.W{i}`` / ``{prefix}.b{i}`` in ``store``.

    Glorot-normal weights, zero biases.
    """
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        if last and zero_last:
            w = np.zeros((n_in, n_out))
        else:
            w = rng.standard_normal((n_in, n_out)) * np.sqrt(2.0 / (n_in + n_out))
        store.add(f"{prefix}.W{i}", w)
        store.add(f"{prefix}.b{i}", np.zeros(n_out))


def mlp(
    params: Mapping[str, T.Tensor],
    prefix: str,
    x: T.Tensor,
    n_layers: int,
    activation: str = "tanh",
) -> T.Tensor:
    act = ACTIVATIONS[activation]
    h = x
    for i in range(n_layers):
        h = T.add(T.matmul(h, params[f"{prefix}.W{i}"]), params[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h
