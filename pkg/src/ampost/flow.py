"""Conditional RealNVP: ``x = G(z, y)`` with an exact log-determinant.

Each flow step holds two affine coupling layers.  The first keeps the
even-indexed coordinates fixed and rescales/shifts the odd ones from
``[x_even || y]``; the second swaps the roles.  Because the partition
alternates strictly, the state is carried as the (even, odd) pair and only
interleaved at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensorcore import nn
from .tensorcore import tensor as T
from .tensorcore.container import read_container, write_container
from .tensorcore.optim import ParamStore
from .tensorcore.tensor import Tensor, as_tensor

CONDITION_MODES = ("masked_signal", "masked_signal_plus_mask")


@dataclass(frozen=True)
class CouplingLayer:
    """One affine coupling; ``passive`` is 0 (even half fixed) or 1 (odd half fixed)."""

    index: int
    passive: int
    n_passive: int
    n_active: int
    cond_dim: int
    sizes: tuple[int, ...]

    @property
    def prefix(self) -> str:
        return f"flow.{self.index}"

    def scale_shift(self, params, x_passive, y, clamp: float):
        if x_passive is None:
            inp = y
        elif y is None:
            inp = x_passive
        else:
            inp = T.concat([x_passive, y], axis=1)
        n = len(self.sizes) - 1
        raw = nn.mlp(params, self.prefix + ".s", inp, n, "tanh")
        s = T.scale(T.tanh(T.scale(raw, 1.0 / clamp)), clamp)
        shift = nn.mlp(params, self.prefix + ".t", inp, n, "tanh")
        return s, shift


class ConditionalFlow:
    def __init__(
        self,
        dim: int,
        cond_dim: int,
        steps: int = 24,
        hidden_width: int = 64,
        hidden_layers: int = 2,
        scale_clamp: float = 2.0,
        output_sigmoid: bool = False,
        rng: np.random.Generator | None = None,
        store: ParamStore | None = None,
        zero_init: bool = True,
    ):
        if dim < 1 or cond_dim < 0 or steps < 1:
            raise ValueError("need dim >= 1, cond_dim >= 0, steps >= 1")
        self.dim = int(dim)
        self.cond_dim = int(cond_dim)
        self.steps = int(steps)
        self.hidden_width = int(hidden_width)
        self.hidden_layers = int(hidden_layers)
        self.scale_clamp = float(scale_clamp)
        self.output_sigmoid = bool(output_sigmoid)
        self.even = np.arange(0, dim, 2)
        self.odd = np.arange(1, dim, 2)
        self.layers: list[CouplingLayer] = []
        halves = (len(self.even), len(self.odd))
        for i in range(2 * self.steps):
            passive = i % 2
            n_p, n_a = halves[passive], halves[1 - passive]
            if n_a == 0 or n_p + self.cond_dim == 0:
                continue
            sizes = (n_p + self.cond_dim, *([self.hidden_width] * self.hidden_layers), n_a)
            self.layers.append(CouplingLayer(i, passive, n_p, n_a, self.cond_dim, sizes))
        if store is None:
            store = ParamStore()
            rng = rng if rng is not None else np.random.default_rng(0)
            for layer in self.layers:
                nn.init_mlp(store, layer.prefix + ".s", layer.sizes, rng, zero_last=zero_init)
                nn.init_mlp(store, layer.prefix + ".t", layer.sizes, rng, zero_last=zero_init)
        self.store = store
        self._interleave = np.argsort(np.concatenate([self.even, self.odd]))

    # ------------------------------------------------------------ helpers

    def _params(self, params):
        return self.store.leaves(trainable=False) if params is None else params

    def _cond(self, y, n: int):
        if self.cond_dim == 0:
            return None
        y = as_tensor(y)
        if y.ndim == 1:
            y = Tensor(np.broadcast_to(y.data, (n, self.cond_dim))) if not y.requires_grad else \
                T.add(T.reshape(y, (1, self.cond_dim)), np.zeros((n, 1)))
        if y.shape != (n, self.cond_dim):
            raise ValueError(f"condition shape {y.shape} != ({n}, {self.cond_dim})")
        return y

    def _split(self, v: Tensor):
        e = T.take(v, self.even, axis=1)
        o = T.take(v, self.odd, axis=1) if len(self.odd) else None
        return [e, o]

    def _merge(self, halves) -> Tensor:
        e, o = halves
        if o is None:
            return e
        return T.take(T.concat([e, o], axis=1), self._interleave, axis=1)

    # ------------------------------------------------------------ maps

    def forward(self, z, y, params=None):
        """``x = G(z, y)`` and ``log|det dG/dz|`` per row."""
        z = as_tensor(z)
        squeeze = z.ndim == 1
        if squeeze:
            z = T.reshape(z, (1, z.shape[0]))
        if z.shape[1] != self.dim:
            raise ValueError(f"expected latent dim {self.dim}, got {z.shape[1]}")
        n = z.shape[0]
        p = self._params(params)
        yc = self._cond(y, n)
        h = self._split(z)
        logdet = Tensor(np.zeros(n))
        for layer in self.layers:
            act = 1 - layer.passive
            s, shift = layer.scale_shift(p, h[layer.passive], yc, self.scale_clamp)
            h[act] = T.add(T.mul(h[act], T.exp(s)), shift)
            logdet = T.add(logdet, T.sum_(s, axis=1))
        x = self._merge(h)
        if self.output_sigmoid:
            x, ld = _sigmoid_forward(x)
            logdet = T.add(logdet, ld)
        if squeeze:
            return T.reshape(x, (self.dim,)), T.reshape(logdet, ())
        return x, logdet

    def inverse(self, x, y, params=None):
        """``z = G^{-1}(x, y)`` and ``log|det dG^{-1}/dx|`` per row."""
        x = as_tensor(x)
        squeeze = x.ndim == 1
        if squeeze:
            x = T.reshape(x, (1, x.shape[0]))
        if x.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {x.shape[1]}")
        n = x.shape[0]
        p = self._params(params)
        yc = self._cond(y, n)
        logdet = Tensor(np.zeros(n))
        if self.output_sigmoid:
            x, ld = _sigmoid_inverse(x)
            logdet = T.add(logdet, ld)
        h = self._split(x)
        for layer in reversed(self.layers):
            act = 1 - layer.passive
            s, shift = layer.scale_shift(p, h[layer.passive], yc, self.scale_clamp)
            h[act] = T.mul(T.sub(h[act], shift), T.exp(T.scale(s, -1.0)))
            logdet = T.sub(logdet, T.sum_(s, axis=1))
        z = self._merge(h)
        if squeeze:
            return T.reshape(z, (self.dim,)), T.reshape(logdet, ())
        return z, logdet

    # ------------------------------------------------------------ io

    def save(self, path, extra: dict | None = None) -> None:
        tensors = dict(self.store.params)
        tensors["meta.flow"] = np.array([
            self.dim, self.cond_dim, self.steps, self.hidden_width, self.hidden_layers,
            self.scale_clamp, float(self.output_sigmoid),
        ], dtype=np.float64)
        for k, v in (extra or {}).items():
            tensors[f"meta.{k}"] = np.atleast_1d(np.asarray(v, dtype=np.float64))
        write_container(path, tensors)

    @classmethod
    def load(cls, path) -> tuple["ConditionalFlow", dict[str, np.ndarray]]:
        data = read_container(path)
        dim, cond, steps, width, layers, clamp, sig = data["meta.flow"]
        store = ParamStore()
        meta = {}
        for k, v in data.items():
            if k.startswith("meta."):
                meta[k[5:]] = v
            else:
                store.add(k, v)
        flow = cls(int(dim), int(cond), int(steps), int(width), int(layers), float(clamp), bool(sig), store=store)
        return flow, meta


def _sigmoid_forward(u: Tensor):
    sig = T.div(1.0, T.add(1.0, T.exp(T.scale(u, -1.0))))
    ld = T.sum_(T.add(T.log(sig), T.log(T.sub(1.0, sig))), axis=1)
    return sig, ld


def _sigmoid_inverse(x: Tensor):
    u = T.log(T.div(x, T.sub(1.0, x)))
    ld = T.scale(T.sum_(T.add(T.log(x), T.log(T.sub(1.0, x))), axis=1), -1.0)
    return u, ld


# ---------------------------------------------------------------- operations

def flow_forward(flow: ConditionalFlow, z, y, params=None):
    return flow.forward(z, y, params)


def flow_inverse(flow: ConditionalFlow, x, y, params=None):
    return flow.inverse(x, y, params)


def flow_logprob(flow: ConditionalFlow, x, y, params=None) -> Tensor:
    """``log q(x | y) = log N(z; 0, I) + log|det dG^{-1}/dx|``."""
    z, ld = flow.inverse(x, y, params)
    return T.add(T.gaussian_logpdf(z), ld)


def sample_posterior(flow: ConditionalFlow, y, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` independent draws ``G(z_i, y)``; one flow pass for the whole batch."""
    if n < 1:
        raise ValueError("need n >= 1")
    z = rng.standard_normal((n, flow.dim))
    with T.no_grad():
        x, _ = flow.forward(Tensor(z), np.asarray(y, dtype=np.float64))
    return x.data


def condition_vector(y, mask=None, mode: str = "masked_signal_plus_mask") -> np.ndarray:
    """Flow conditioning input built from a measurement.

    For masking operators ``y`` already carries zeros at unobserved entries;
    the mask is appended unless ``mode`` is the blind ``masked_signal``.
    """
    if mode not in CONDITION_MODES:
        raise ValueError(f"unknown condition mode {mode!r}")
    y = np.asarray(y, dtype=np.float64)
    if mask is None or mode == "masked_signal":
        return y
    return np.concatenate([y, np.broadcast_to(np.asarray(mask, dtype=np.float64), y.shape)], axis=-1)


def standard_normal_logpdf(z) -> np.ndarray:
    z = np.atleast_2d(z)
    return -0.5 * np.sum(z * z, axis=1) - 0.5 * z.shape[1] * math.log(2 * math.pi)
