"""Parameter storage and the Adam update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor


@dataclass
class ParamStore:
    """Named float64 parameters plus Adam moments.

    Arrays are replaced, never written in place, so anything holding a
    reference to an earlier array keeps a consistent snapshot.
    """

    params: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def leaves(self, trainable: bool = True) -> dict[str, Tensor]:
        """Fresh graph leaves for one define-by-run step.

        With ``trainable=False`` the leaves are constants, which keeps a frozen
        network out of the backward pass while still letting gradients reach
        its inputs.
        """
        return {
            k: Tensor(v, requires_grad=trainable, name=k if trainable else None)
            for k, v in self.params.items()
        }

    def copy(self) -> "ParamStore":
        return ParamStore(
            params={k: v.copy() for k, v in self.params.items()},
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
            step=self.step,
        )

    def num_params(self) -> int:
        return sum(v.size for v in self.params.values())


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        c = max_norm / total
        return {k: g * c for k, g in grads.items()}, total
    return dict(grads), total


def adam_step(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """Bias-corrected Adam update applied to the keys present in ``grads``."""
    for k, g in grads.items():
        if k not in store.params:
            raise KeyError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != store.params[k].shape:
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {store.params[k].shape} for {k!r}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for k, g in grads.items():
        m = beta1 * store.m[k] + (1.0 - beta1) * g
        v = beta2 * store.v[k] + (1.0 - beta2) * g * g
        store.m[k] = m
        store.v[k] = v
        if lr != 0.0:
            store.params[k] = store.params[k] - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return store


def scheduled_lr(base: float, step: int, total: int, schedule: str = "constant", floor: float = 0.0) -> float:
    """Learning rate at 1-based ``step`` of ``total`` for a named schedule."""
    if schedule == "constant" or total <= 1:
        return base
    if schedule == "cosine":
        frac = min(max((step - 1) / (total - 1), 0.0), 1.0)
        return floor * base + (1.0 - floor) * base * 0.5 * (1.0 + np.cos(np.pi * frac))
    raise ValueError(f"unknown lr schedule {schedule!r}")
