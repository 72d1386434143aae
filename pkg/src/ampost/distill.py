"""Amortized variational distillation of a frozen score prior into a flow.

Per measurement ``y`` and latent ``z`` the cost is

    fidelity  ||y - A(G(z, y))||^2 / (2 sigma_y^2)
  + prior     (T - eps)/2 g(t)^2 ||s(x_t, t) + noise / sigma_t||^2  [+ terminal]
  + entropy   log N(z; 0, I) - log|det dG/dz|

with ``x_t = alpha_t G(z, y) + sigma_t noise`` and ``t ~ U(eps, T)``.  The
prior term is a one-sample estimate of the negated likelihood lower bound
with parameter-free constants dropped.  Gradients reach the flow through the
score network's input; the score weights are constants.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffusion import NoiseSchedule, alpha_beta, drift_diffusion
from .flow import ConditionalFlow, condition_vector
from .operators import ForwardOperator, MeasurementSet
from .score import TrainingDiverged, score_eval
from .tensorcore import tensor as T
from .tensorcore.optim import adam_step, clip_grad_norm, scheduled_lr
from .tensorcore.tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    sigma_y: float | None = None  # None: use the measurement set's noise level
    n_t_samples: int = 1
    lr: float = 1e-5
    lr_schedule: str = "constant"
    lr_floor: float = 0.0
    batch_size: int = 64
    iterations: int = 1000
    include_terminal_term: bool = True
    score_jacobian: bool = True
    grad_clip: float = 100.0
    condition_mode: str = "masked_signal_plus_mask"
    log_every: int = 100
    checkpoint: str | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.sigma_y is not None and self.sigma_y <= 0:
            raise ValueError("sigma_y must be positive")
        if self.n_t_samples < 1:
            raise ValueError("n_t_samples must be >= 1")

    @classmethod
    def from_config(cls, cfg) -> "DistillConfig":
        out = cls()
        convs = {
            "sigma_y": float, "n_t_samples": int, "lr": float, "lr_schedule": str,
            "lr_floor": float, "batch_size": int, "iterations": int,
            "include_terminal_term": _as_bool, "score_jacobian": _as_bool,
            "grad_clip": float, "log_every": int, "checkpoint_every": int,
        }
        for key, conv in convs.items():
            if f"distill.{key}" in cfg:
                setattr(out, key, conv(cfg[f"distill.{key}"]))
        if "flow.condition_mode" in cfg:
            out.condition_mode = str(cfg["flow.condition_mode"])
        out.__post_init__()
        return out


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


@dataclass
class LossBreakdown:
    fidelity: float
    prior: float
    entropy: float
    total: float
    step: int = 0


# ---------------------------------------------------------------- loss terms

def fidelity_loss(x0_hat, y, op: ForwardOperator, sigma_y: float) -> Tensor:
    """``||y - A(x0_hat)||^2 / (2 sigma_y^2)`` per row."""
    ax = op.apply(x0_hat)
    y = np.asarray(y, dtype=np.float64)
    if tuple(ax.shape) != y.shape:
        raise ValueError(f"A(x) shape {ax.shape} != y shape {y.shape}")
    r = T.sum_(T.square(T.sub(y, ax)), axis=-1)
    return T.scale(r, 0.5 / sigma_y ** 2)


def terminal_term(x0_hat, sched: NoiseSchedule) -> Tensor:
    """``-E[log N(x_T; 0, I)]`` up to constants: ``alpha_T^2 ||x0||^2 / 2``."""
    alpha_T, _ = alpha_beta(sched, sched.T)
    return T.scale(T.sum_(T.square(x0_hat), axis=-1), 0.5 * alpha_T ** 2)


def elbo_prior_loss(x0_hat, score, sched: NoiseSchedule, rng: np.random.Generator,
                    cfg: DistillConfig | None = None, t=None, noise=None) -> Tensor:
    """Monte-Carlo estimate of the negated surrogate bound, per row.

    ``t`` / ``noise`` may be given explicitly with shapes ``(S, B)`` and
    ``(S, B, d)`` for ``S`` samples per row.
    """
    cfg = cfg or DistillConfig()
    x = x0_hat if isinstance(x0_hat, Tensor) else Tensor(x0_hat)
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1, x.shape[0]))
    n, d = x.shape
    n_s = cfg.n_t_samples if t is None else np.shape(t)[0]
    if t is None:
        t = rng.uniform(sched.eps_min, sched.T, size=(n_s, n))
    if noise is None:
        noise = rng.standard_normal((n_s, n, d))
    width = sched.T - sched.eps_min
    total = None
    for k in range(n_s):
        tk = np.asarray(t[k])
        alpha, sigma = alpha_beta(sched, tk)
        x_t = T.add(T.mul(x, alpha.reshape(-1, 1)), sigma.reshape(-1, 1) * noise[k])
        s_in = x_t if cfg.score_jacobian else T.stop_gradient(x_t)
        s = score_eval(score, s_in, tk)
        resid = T.add(s, noise[k] / sigma.reshape(-1, 1))
        _, g = drift_diffusion(sched, x_t.data, tk)
        term = T.mul(T.sum_(T.square(resid), axis=1), 0.5 * width * np.asarray(g) ** 2 / n_s)
        total = term if total is None else T.add(total, term)
    if cfg.include_terminal_term:
        total = T.add(total, terminal_term(x, sched))
    return T.reshape(total, ()) if squeeze else total


def entropy_loss(z, logdet) -> Tensor:
    """``log N(z; 0, I) - log|det dG/dz|`` per row (a cost)."""
    return T.sub(T.gaussian_logpdf(z), logdet)


# ---------------------------------------------------------------- training

def flow_condition(mset: MeasurementSet, idx, mode: str) -> np.ndarray:
    y = mset.y[idx]
    mask = None if mset.masks is None else mset.masks[idx]
    return condition_vector(y, mask, mode)


def condition_dim(mset: MeasurementSet, mode: str) -> int:
    m = mset.y.shape[1]
    return 2 * m if (mset.masks is not None and mode == "masked_signal_plus_mask") else m


def distill_objective(flow: ConditionalFlow, score, mset: MeasurementSet, idx, z,
                      sched: NoiseSchedule, rng: np.random.Generator, cfg: DistillConfig,
                      params=None) -> tuple[Tensor, dict[str, Tensor]]:
    """Mean total cost over the batch rows ``idx`` plus the per-term means."""
    sigma_y = cfg.sigma_y if cfg.sigma_y is not None else mset.sigma_y
    cond = flow_condition(mset, idx, cfg.condition_mode)
    terms: dict[str, Tensor] = {}
    name = "flow"
    try:
        x_hat, logdet = flow.forward(Tensor(z), cond, params)
        name = "fidelity"
        terms["fidelity"] = T.mean(fidelity_loss(x_hat, mset.y[idx], mset.operator(idx), sigma_y))
        name = "prior"
        terms["prior"] = T.mean(elbo_prior_loss(x_hat, score, sched, rng, cfg))
        name = "entropy"
        terms["entropy"] = T.mean(entropy_loss(Tensor(z), logdet))
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite {name} term: {exc}") from exc
    total = T.add(T.add(terms["fidelity"], terms["prior"]), terms["entropy"])
    return total, terms


@dataclass
class DistillResult:
    flow: ConditionalFlow
    trace: list[LossBreakdown] = field(default_factory=list)
    totals: np.ndarray = field(default_factory=lambda: np.zeros(0))


def distill_train(
    flow: ConditionalFlow,
    score,
    mset: MeasurementSet,
    cfg: DistillConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    callback: Callable[[int, ConditionalFlow], None] | None = None,
) -> DistillResult:
    """Fit the flow parameters by Adam on the amortized objective.

    Only measurements are read; ground-truth signals are not part of a
    :class:`MeasurementSet`.
    """
    n = len(mset)
    if n == 0:
        raise ValueError("empty measurement set")
    if condition_dim(mset, cfg.condition_mode) != flow.cond_dim:
        raise ValueError("flow condition dim does not match the measurement set")
    trace: list[LossBreakdown] = []
    totals = np.zeros(cfg.iterations)
    acc = np.zeros(4)
    acc_n = 0
    for it in range(1, cfg.iterations + 1):
        idx = rng.integers(0, n, size=cfg.batch_size)
        z = rng.standard_normal((cfg.batch_size, flow.dim))
        params = flow.store.leaves()
        total, terms = distill_objective(flow, score, mset, idx, z, sched, rng, cfg, params)
        vals = np.array([terms["fidelity"].item(), terms["prior"].item(), terms["entropy"].item(), total.item()])
        for name, v in zip(("fidelity", "prior", "entropy", "total"), vals):
            if not np.isfinite(v):
                raise TrainingDiverged(f"{name} term is {v} at step {it}")
        grads = T.backward(total)
        grads, _ = clip_grad_norm(grads, cfg.grad_clip)
        adam_step(flow.store, grads, scheduled_lr(cfg.lr, it, cfg.iterations, cfg.lr_schedule, cfg.lr_floor))
        totals[it - 1] = vals[3]
        acc += vals
        acc_n += 1
        if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.iterations):
            f, p, e, tot = acc / acc_n
            trace.append(LossBreakdown(float(f), float(p), float(e), float(tot), it))
            log.info("distill step %d  fid %.4f  prior %.4f  ent %.4f  total %.4f", it, f, p, e, tot)
            acc[:] = 0
            acc_n = 0
        if cfg.checkpoint and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            flow.save(cfg.checkpoint)
        if callback is not None:
            callback(it, flow)
    if cfg.checkpoint:
        flow.save(cfg.checkpoint)
    return DistillResult(flow, trace, totals)


def write_trace_csv(path, trace: list[LossBreakdown]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "fidelity", "prior", "entropy", "total"])
        for b in trace:
            w.writerow([b.step, repr(b.fidelity), repr(b.prior), repr(b.entropy), repr(b.total)])
