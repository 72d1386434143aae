"""Variance-preserving SDE with a linear rate schedule.

Forward process ``dx = -1/2 b(t) x dt + sqrt(b(t)) dw`` with
``b(t) = beta_min + t (beta_max - beta_min) / T``.  The transition kernel is
``N(alpha_t x0, sigma_t^2 I)`` where ``sigma_t`` is a standard deviation and
``alpha_t^2 + sigma_t^2 = 1``.

Functions accept plain arrays or autodiff :class:`Tensor` values for the
signal arguments.  Times may be scalars or one time per batch row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensorcore.tensor import Tensor

_T_SLACK = 1e-12


@dataclass(frozen=True)
class NoiseSchedule:
    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    eps_min: float = 1e-3

    def __post_init__(self):
        if self.beta_min <= 0 or self.beta_max < self.beta_min:
            raise ValueError("need 0 < beta_min <= beta_max")
        if not 0 < self.eps_min < self.T:
            raise ValueError("need 0 < eps_min < T")

    @classmethod
    def from_config(cls, cfg) -> "NoiseSchedule":
        return cls(
            beta_min=float(cfg.get("sde.beta_min", 0.1)),
            beta_max=float(cfg.get("sde.beta_max", 20.0)),
            T=float(cfg.get("sde.T", 1.0)),
            eps_min=float(cfg.get("sde.eps_min", 1e-3)),
        )

    def rate(self, t):
        """Instantaneous rate b(t)."""
        return self.beta_min + np.asarray(t, dtype=np.float64) * (self.beta_max - self.beta_min) / self.T

    def integrated_rate(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.T

    def check_time(self, t, lo: float | None = None) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        lo = self.eps_min if lo is None else lo
        if np.any(t < lo - _T_SLACK) or np.any(t > self.T + _T_SLACK):
            raise ValueError(f"time outside [{lo}, {self.T}]")
        return t


def alpha_beta(sched: NoiseSchedule, t, lo: float | None = None):
    """Kernel mean factor ``alpha_t`` and std ``sigma_t`` at time ``t``.

    ``lo`` lowers the accepted time range (e.g. to 0 for ODE oracles).
    """
    t = sched.check_time(t, lo)
    integral = sched.integrated_rate(t)
    alpha = np.exp(-0.5 * integral)
    sigma = np.sqrt(-np.expm1(-integral))
    if alpha.ndim == 0:
        return float(alpha), float(sigma)
    return alpha, sigma


def _col(a, x):
    """Shape per-row coefficients so they broadcast against ``x``."""
    a = np.asarray(a, dtype=np.float64)
    ndim = x.ndim if isinstance(x, (Tensor, np.ndarray)) else np.ndim(x)
    if a.ndim == 1 and ndim >= 2:
        return a.reshape((-1,) + (1,) * (ndim - 1))
    return a if a.ndim else float(a)


def perturb(sched: NoiseSchedule, x0, t, noise):
    """Sample the kernel: ``x_t = alpha_t x0 + sigma_t noise``.

    Returns ``(x_t, kernel_score)`` where ``kernel_score = -noise / sigma_t`` is
    the gradient of ``log p(x_t | x0)``.
    """
    if np.shape(noise) != tuple(x0.shape if isinstance(x0, Tensor) else np.shape(x0)):
        raise ValueError("noise shape must equal x0 shape")
    alpha, sigma = alpha_beta(sched, t)
    a, s = _col(alpha, x0), _col(sigma, x0)
    noise = np.asarray(noise, dtype=np.float64)
    x_t = x0 * a + s * noise
    return x_t, -noise / s


def drift_diffusion(sched: NoiseSchedule, x, t):
    """Drift ``f(x, t) = -1/2 b(t) x`` and diffusion ``g(t) = sqrt(b(t))``."""
    t = sched.check_time(t, lo=0.0)
    b = sched.rate(t)
    return x * _col(-0.5 * b, x), np.sqrt(b) if np.ndim(b) else float(np.sqrt(b))


def tweedie_denoise(sched: NoiseSchedule, x_t, t, score):
    """Posterior mean ``(x_t + sigma_t^2 score) / alpha_t``."""
    xs = x_t.shape if isinstance(x_t, Tensor) else np.shape(x_t)
    ss = score.shape if isinstance(score, Tensor) else np.shape(score)
    if tuple(xs) != tuple(ss):
        raise ValueError("score shape must equal x_t shape")
    alpha, sigma = alpha_beta(sched, t, lo=0.0)
    if np.any(np.asarray(alpha) < 1e-8):
        raise ValueError("alpha_t below 1e-8; denoised estimate is degenerate")
    s2 = _col(np.asarray(sigma) ** 2, x_t)
    return (x_t + score * s2) * _col(1.0 / np.asarray(alpha), x_t)
