"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor`.  When gradient recording is on and
at least one input requires a gradient, the output keeps references to its
parents plus a closure that maps the output adjoint to parent adjoints.
:func:`backward` walks that DAG once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_LOG_2PI = math.log(2.0 * math.pi)

OP_KINDS = (
    "add", "sub", "mul", "div", "matmul", "exp", "log", "tanh", "relu",
    "sum", "mean", "square", "concat", "split", "reshape", "scale",
    "gaussian_logpdf",
)


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class GraphError(RuntimeError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "name")

    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{tag})"

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return scale(self, -1.0)

    def sum(self, axis=None, keepdims=False): return sum_(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, kind: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{kind}: non-finite output")


def _make(data: np.ndarray, kind: str, parents: tuple[Tensor, ...], fn) -> Tensor:
    _check_finite(data, kind)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.name = None
    out.op = kind
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = fn
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape}") from exc


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.data, b.data)
    ad, bd = a.data, b.data
    return _make(ad * bd, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a.data, b.data)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def fn(g):
        gb = g / bd
        return _unbroadcast(gb, ad.shape), _unbroadcast(-gb * out, bd.shape)

    return _make(out, "div", (a, b), fn)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make(a.data * c, "scale", (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, "log", (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at exactly 0 is 0
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), "relu", (a,), lambda g: (g * pos,))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, "square", (a,), lambda g: (2.0 * g * ad,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim != 2 or ad.shape[-1] != bd.shape[0]:
        raise ValueError(f"matmul: shape mismatch {ad.shape} @ {bd.shape}")
    out = ad @ bd

    def fn(g):
        ga = g @ bd.T
        if ad.ndim == 1:
            gb = np.outer(ad, g)
        else:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(out, "matmul", (a, b), fn)


# ---------------------------------------------------------------- reductions

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(out, "sum", (a,), fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    n = a.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape),)

    return _make(out, "mean", (a,), fn)


# ---------------------------------------------------------------- structure

def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: shape mismatch {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", ts, fn)


def take(a, index, axis: int = -1) -> Tensor:
    """Select ``index`` positions along ``axis``; the adjoint scatters back."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape
    out = np.take(a.data, idx, axis=axis)

    def fn(g):
        full = np.zeros(shape)
        ax = axis % len(shape)
        sl = [slice(None)] * len(shape)
        sl[ax] = idx
        np.add.at(full, tuple(sl), g)
        return (full,)

    return _make(out, "split", (a,), fn)


def split(a, groups: Sequence, axis: int = -1) -> list[Tensor]:
    """Split along ``axis`` into several tensors.

    ``groups`` is either a list of section sizes or a list of index arrays.
    """
    a = as_tensor(a)
    n = a.shape[axis]
    if all(np.isscalar(g) for g in groups):
        if sum(int(g) for g in groups) != n:
            raise ValueError(f"split: sizes {list(groups)} do not cover dim {n}")
        starts = np.concatenate([[0], np.cumsum(groups)])
        groups = [np.arange(starts[i], starts[i + 1]) for i in range(len(groups))]
    return [take(a, g, axis) for g in groups]


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ValueError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _make(out, "reshape", (a,), lambda g: (g.reshape(old),))


def stop_gradient(a) -> Tensor:
    """Same value, no adjoint path to ``a``."""
    return Tensor(as_tensor(a).data)


def gaussian_logpdf(x, mu=None, log_sigma=None) -> Tensor:
    """Diagonal-Gaussian log density summed over the last axis.

    ``mu`` and ``log_sigma`` default to the standard normal.
    """
    x = as_tensor(x)
    parents = [x]
    mu_d = 0.0
    ls_d = 0.0
    if mu is not None:
        mu = as_tensor(mu)
        parents.append(mu)
        mu_d = mu.data
    if log_sigma is not None:
        log_sigma = as_tensor(log_sigma)
        parents.append(log_sigma)
        ls_d = log_sigma.data
    inv_var = np.exp(-2.0 * np.asarray(ls_d))
    diff = x.data - mu_d
    full = diff * diff * inv_var
    elem = -0.5 * full - ls_d - 0.5 * _LOG_2PI
    elem = np.broadcast_to(elem, np.broadcast_shapes(x.shape, np.shape(mu_d), np.shape(ls_d)))
    out = elem.sum(axis=-1)

    def fn(g):
        ge = np.expand_dims(g, -1)
        dx = -ge * diff * inv_var
        grads = [_unbroadcast(dx, x.shape)]
        if mu is not None:
            grads.append(_unbroadcast(-dx, mu.shape))
        if log_sigma is not None:
            grads.append(_unbroadcast(ge * (full - 1.0), log_sigma.shape))
        return tuple(grads)

    return _make(out, "gaussian_logpdf", tuple(parents), fn)


_DISPATCH = {
    "add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul,
    "exp": exp, "log": log, "tanh": tanh, "relu": relu, "sum": sum_,
    "mean": mean, "square": square, "concat": lambda *ts, axis=0: concat(ts, axis),
    "split": split, "reshape": reshape, "scale": scale,
    "gaussian_logpdf": gaussian_logpdf,
}


def build_op(kind: str, inputs: Sequence, **kwargs):
    """Apply op ``kind`` to ``inputs``; extra arguments go through ``kwargs``."""
    if kind not in _DISPATCH:
        raise ValueError(f"unknown op kind {kind!r}")
    fn = _DISPATCH[kind]
    if kind in ("split", "reshape", "scale"):
        (x,) = inputs
        key = {"split": "groups", "reshape": "shape", "scale": "c"}[kind]
        return fn(x, kwargs.pop(key), **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward

class Graph:
    """Topologically ordered view of the DAG feeding a root tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        order: list[Tensor] = []
        state: dict[int, int] = {}  # 1 = on stack, 2 = done
        stack: list[tuple[Tensor, int]] = [(root, 0)]
        while stack:
            node, i = stack.pop()
            key = id(node)
            if i == 0:
                st = state.get(key)
                if st == 2:
                    continue
                if st == 1:
                    raise GraphError("cycle detected in graph")
                state[key] = 1
            if i < len(node.parents):
                stack.append((node, i + 1))
                p = node.parents[i]
                if p.requires_grad:
                    ps = state.get(id(p))
                    if ps == 1:
                        raise GraphError("cycle detected in graph")
                    if ps is None:
                        stack.append((p, 0))
            else:
                state[key] = 2
                order.append(node)
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)


def _adjoints(root: Tensor, graph: Graph | None = None) -> dict[int, np.ndarray]:
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    if graph is None:
        graph = Graph.trace(root)
    adj: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g = adj.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for p, gp in zip(node.parents, node.backward_fn(g)):
            if not p.requires_grad or gp is None:
                continue
            k = id(p)
            prev = adj.get(k)
            adj[k] = gp if prev is None else prev + gp
    return adj


def backward(root: Tensor, graph: Graph | None = None) -> dict[str, np.ndarray]:
    """Gradient of scalar ``root`` for every named leaf that requires grad.

    Leaves the root does not depend on are absent from the result.
    """
    if graph is None:
        graph = Graph.trace(root) if root.requires_grad else Graph([])
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    adj = _adjoints(root, graph) if root.requires_grad else {}
    out: dict[str, np.ndarray] = {}
    for node in graph.nodes:
        if node.name is not None and not node.parents and node.requires_grad:
            out[node.name] = np.array(adj.get(id(node), np.zeros(node.shape)), dtype=np.float64)
    return out


def grad(root: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradient of scalar ``root`` with respect to each tensor in ``wrt``."""
    wrt = list(wrt)
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    adj = _adjoints(root) if root.requires_grad else {}
    return [np.array(np.broadcast_to(adj.get(id(w), 0.0), w.shape), dtype=np.float64) for w in wrt]
