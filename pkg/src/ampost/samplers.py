"""Iterative diffusion samplers and likelihood oracles.

These are the baselines the one-pass flow is compared against (reverse-SDE
and DPS sampling) and the exact references used to check it (probability
flow log-likelihood, full likelihood lower bound).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, alpha_beta, drift_diffusion, tweedie_denoise
from .operators import ForwardOperator, Measurement
from .score import score_eval
from .tensorcore import tensor as T
from .tensorcore.tensor import NonFiniteError, Tensor


class SolverError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    steps: int = 1000
    zeta: float = 1e-3
    integrator: str = "euler_maruyama"
    ode_tol: float = 1e-6
    probability_flow: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")
        if self.integrator != "euler_maruyama":
            raise ValueError(f"unsupported integrator {self.integrator!r}")


def _score_np(score, x: np.ndarray, t: float) -> np.ndarray:
    with T.no_grad():
        return score_eval(score, Tensor(x), t).data


def _time_grid(sched: NoiseSchedule, steps: int) -> np.ndarray:
    return np.linspace(sched.T, sched.eps_min, steps + 1)


def _check(x: np.ndarray, i: int) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"sampler state became non-finite at step {i}")


def reverse_sde_sample(score, sched: NoiseSchedule, cfg: SamplerConfig, rng: np.random.Generator,
                       n: int = 1, dim: int | None = None) -> np.ndarray:
    """Euler-Maruyama on the reverse SDE from ``x_T ~ N(0, I)`` to ``eps_min``.

    With ``cfg.probability_flow`` the noise is dropped and the score weight is
    halved, giving an Euler discretization of the probability-flow ODE.
    """
    dim = dim if dim is not None else score.dim
    x = rng.standard_normal((n, dim))
    ts = _time_grid(sched, cfg.steps)
    for i in range(cfg.steps):
        t, dt = ts[i], ts[i] - ts[i + 1]
        s = _score_np(score, x, t)
        f, g = drift_diffusion(sched, x, t)
        if cfg.probability_flow:
            x = x - (f - 0.5 * g * g * s) * dt
        else:
            x = x - (f - g * g * s) * dt + g * math.sqrt(dt) * rng.standard_normal(x.shape)
        _check(x, i)
    return x


def dps_sample(score, sched: NoiseSchedule, meas: Measurement, op: ForwardOperator | None,
               cfg: SamplerConfig, rng: np.random.Generator, n: int = 1,
               dim: int | None = None) -> np.ndarray:
    """Reverse-SDE sampling with measurement guidance through the denoised estimate.

    Each step takes the unconditional update and then subtracts
    ``zeta * grad_x ||y - A(x0_hat(x))||^2 / sigma_y^2`` with ``x0_hat`` from
    Tweedie's formula; the gradient passes through the score's input.
    """
    op = op if op is not None else meas.op
    if op is None:
        raise ValueError("DPS needs a known forward operator")
    dim = dim if dim is not None else op.in_dim
    y = np.asarray(meas.y, dtype=np.float64)
    weight = cfg.zeta / max(meas.sigma_y, 1e-12) ** 2 if meas.sigma_y > 0 else cfg.zeta
    x = rng.standard_normal((n, dim))
    ts = _time_grid(sched, cfg.steps)
    for i in range(cfg.steps):
        t, dt = ts[i], ts[i] - ts[i + 1]
        if cfg.zeta > 0:
            xt = Tensor(x, requires_grad=True)
            s_t = score_eval(score, xt, t)
            x0 = tweedie_denoise(sched, xt, t, s_t)
            resid = T.sum_(T.square(T.sub(y, op.apply(x0))))
            (gx,) = T.grad(resid, [xt])
            s = s_t.data
        else:
            s = _score_np(score, x, t)
            gx = 0.0
        f, g = drift_diffusion(sched, x, t)
        x = x - (f - g * g * s) * dt + g * math.sqrt(dt) * rng.standard_normal(x.shape)
        x = x - weight * gx
        _check(x, i)
    return x


# ---------------------------------------------------------------- likelihood

def score_divergence(score, x: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Score and its exact divergence per row (one reverse pass per coordinate)."""
    xt = Tensor(x, requires_grad=True)
    s = score_eval(score, xt, t)
    div = np.zeros(x.shape[0])
    for i in range(x.shape[1]):
        (gi,) = T.grad(T.sum_(T.take(s, [i], axis=1)), [xt])
        div += gi[:, i]
    return s.data, div


def _pf_rhs(score, sched: NoiseSchedule, x: np.ndarray, t: float):
    s, div_s = score_divergence(score, x, t)
    f, g = drift_diffusion(sched, x, t)
    b = sched.rate(t)
    v = f - 0.5 * g * g * s
    div_v = -0.5 * b * x.shape[1] - 0.5 * g * g * div_s
    return v, div_v


def pf_ode_loglik(score, sched: NoiseSchedule, x0, ode_tol: float = 1e-6,
                  max_steps: int = 100_000) -> np.ndarray:
    """``log p(x0)`` via the probability-flow ODE with exact divergence.

    Integrates ``(x, int div)`` from ``eps_min`` to ``T`` with step-doubling
    adaptive RK4, then adds the standard-normal log density at ``x(T)``.
    """
    x = np.atleast_2d(np.asarray(x0, dtype=np.float64)).copy()
    n, d = x.shape
    if d > 16:
        raise ValueError("exact-divergence likelihood is limited to d <= 16")
    acc = np.zeros(n)
    t, t_end = sched.eps_min, sched.T
    h = 1e-3

    def rk4(x, acc, t, h):
        k1, a1 = _pf_rhs(score, sched, x, t)
        k2, a2 = _pf_rhs(score, sched, x + 0.5 * h * k1, t + 0.5 * h)
        k3, a3 = _pf_rhs(score, sched, x + 0.5 * h * k2, t + 0.5 * h)
        k4, a4 = _pf_rhs(score, sched, x + h * k3, t + h)
        return (x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4),
                acc + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4))

    steps = 0
    while t < t_end - 1e-14:
        h = min(h, t_end - t)
        x_full, a_full = rk4(x, acc, t, h)
        x_half, a_half = rk4(x, acc, t, 0.5 * h)
        x_two, a_two = rk4(x_half, a_half, t + 0.5 * h, 0.5 * h)
        err = max(np.max(np.abs(x_two - x_full)), np.max(np.abs(a_two - a_full))) / 15.0
        if err <= ode_tol or h < 1e-10:
            # Richardson-extrapolated step
            x = x_two + (x_two - x_full) / 15.0
            acc = a_two + (a_two - a_full) / 15.0
            t += h
        steps += 1
        if steps > max_steps:
            raise SolverError("probability-flow ODE did not converge")
        h *= min(4.0, max(0.1, 0.9 * (ode_tol / max(err, 1e-300)) ** 0.2))
    log_pt = -0.5 * np.sum(x * x, axis=1) - 0.5 * d * math.log(2 * math.pi)
    return log_pt + acc


def pf_ode_trajectory(score, sched: NoiseSchedule, x_T, steps: int = 2000) -> np.ndarray:
    """Fixed-step RK4 of the probability-flow ODE from ``T`` down to ``eps_min``."""
    x = np.atleast_2d(np.asarray(x_T, dtype=np.float64)).copy()
    ts = _time_grid(sched, steps)

    def v(x, t):
        s = _score_np(score, x, t)
        f, g = drift_diffusion(sched, x, t)
        return f - 0.5 * g * g * s

    for i in range(steps):
        t, h = ts[i], ts[i + 1] - ts[i]
        k1 = v(x, t)
        k2 = v(x + 0.5 * h * k1, t + 0.5 * h)
        k3 = v(x + 0.5 * h * k2, t + 0.5 * h)
        k4 = v(x + h * k3, t + h)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def elbo_full(score, sched: NoiseSchedule, x0, n_samples: int, rng: np.random.Generator,
              chunk: int = 100_000) -> tuple[float, float]:
    """Full likelihood lower bound at one point: Monte-Carlo mean and standard error.

    Includes the terminal cross-entropy, the kernel-score norm and the drift
    divergence terms that the training surrogate drops.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    d = x0.size
    alpha_T, sigma_T = alpha_beta(sched, sched.T)
    terminal = -0.5 * d * math.log(2 * math.pi) - 0.5 * (alpha_T ** 2 * x0 @ x0 + d * sigma_T ** 2)
    width = sched.T - sched.eps_min
    vals = []
    left = n_samples
    while left > 0:
        m = min(chunk, left)
        left -= m
        t = rng.uniform(sched.eps_min, sched.T, size=m)
        eps = rng.standard_normal((m, d))
        alpha, sigma = alpha_beta(sched, t)
        xt = alpha[:, None] * x0 + sigma[:, None] * eps
        with T.no_grad():
            s = score_eval(score, Tensor(xt), t).data
        g2 = sched.rate(t)
        ks = eps / sigma[:, None]
        # ||s - kernel_score||^2 - ||kernel_score||^2 - (2/g^2) div f,  div f = -b d / 2
        h = np.sum(s * s + 2.0 * s * ks, axis=1) + d
        vals.append(terminal - 0.5 * width * g2 * h)
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))
