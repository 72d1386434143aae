"""Random gradient probes, one builder per op kind.

Each builder returns ``(inputs, fn)`` where ``fn`` maps a list of tensors to
the op output; the probe contracts that output with fixed random weights so
every output entry contributes to the gradient.
"""

from __future__ import annotations

import numpy as np

from ampost.tensorcore import tensor as T
from ampost.tensorcore.gradcheck import finite_diff_gradient
from ampost.tensorcore.tensor import Tensor


def _away_from_zero(rng, shape, lo=0.3, hi=2.0):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _probe(kind: str, rng: np.random.Generator):
    n = rng.standard_normal
    if kind == "add":
        return [n((3, 4)), n(4)], lambda t: T.build_op("add", t)
    if kind == "sub":
        return [n((3, 4)), n((3, 1))], lambda t: T.build_op("sub", t)
    if kind == "mul":
        return [n((3, 4)), n((3, 4))], lambda t: T.build_op("mul", t)
    if kind == "div":
        return [n((3, 4)), _away_from_zero(rng, (4,))], lambda t: T.build_op("div", t)
    if kind == "matmul":
        return [n((3, 4)), n((4, 2))], lambda t: T.build_op("matmul", t)
    if kind == "exp":
        return [n((2, 5))], lambda t: T.build_op("exp", t)
    if kind == "log":
        return [rng.uniform(0.2, 3.0, size=(2, 5))], lambda t: T.build_op("log", t)
    if kind == "tanh":
        return [n((2, 5))], lambda t: T.build_op("tanh", t)
    if kind == "relu":
        return [_away_from_zero(rng, (2, 5), 0.01, 2.0)], lambda t: T.build_op("relu", t)
    if kind == "sum":
        return [n((3, 4))], lambda t: T.build_op("sum", t, axis=1)
    if kind == "mean":
        return [n((3, 4))], lambda t: T.build_op("mean", t, axis=0)
    if kind == "square":
        return [n((2, 5))], lambda t: T.build_op("square", t)
    if kind == "concat":
        return [n((2, 3)), n((2, 2))], lambda t: T.build_op("concat", t, axis=1)
    if kind == "split":
        return [n((3, 5))], lambda t: T.concat(T.build_op("split", t, groups=[2, 3], axis=1)[::-1], axis=1)
    if kind == "reshape":
        return [n((3, 4))], lambda t: T.build_op("reshape", t, shape=(2, 6))
    if kind == "scale":
        return [n((3, 4))], lambda t: T.build_op("scale", t, c=-1.7)
    if kind == "gaussian_logpdf":
        return [n((3, 4)), n((3, 4)), 0.5 * n(4)], lambda t: T.build_op("gaussian_logpdf", t)
    raise KeyError(kind)


def gradient_rel_error(kind: str, rng: np.random.Generator, h: float = 1e-5) -> float:
    """Largest relative error between backward and central differences over the probe's inputs."""
    inputs, fn = _probe(kind, rng)
    with T.no_grad():
        out_shape = fn([Tensor(a) for a in inputs]).shape
    w = rng.standard_normal(out_shape)

    def scalar(arrays) -> float:
        with T.no_grad():
            return float(np.sum(fn([Tensor(a) for a in arrays]).data * w))

    leaves = [Tensor(a, requires_grad=True) for a in inputs]
    root = T.sum_(T.mul(fn(leaves), w))
    grads = T.grad(root, leaves)
    worst = 0.0
    for i, a in enumerate(inputs):
        def f_i(x, i=i):
            arrays = list(inputs)
            arrays[i] = x
            return scalar(arrays)

        fd = finite_diff_gradient(f_i, a, h)
        err = np.linalg.norm(grads[i] - fd) / max(np.linalg.norm(fd), 1e-8)
        worst = max(worst, float(err))
    return worst


def probe_kinds() -> tuple[str, ...]:
    return T.OP_KINDS
