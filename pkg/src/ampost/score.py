"""Score models for the diffusion prior.

Every score model is a callable ``score(x, t) -> Tensor`` built from
autodiff ops, so gradients flow to the input ``x`` (and, for the network, to
its parameters when trainable leaves are passed in).  ``x`` is ``(d,)`` or
``(B, d)``; ``t`` is a scalar or one time per row.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import diffusion
from .diffusion import NoiseSchedule, alpha_beta, drift_diffusion
from .tensorcore import nn
from .tensorcore import tensor as T
from .tensorcore.container import read_container, write_container
from .tensorcore.optim import ParamStore, adam_step, clip_grad_norm, scheduled_lr
from .tensorcore.tensor import NonFiniteError, Tensor, as_tensor

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


def _as_batch(x):
    x = as_tensor(x)
    if x.ndim == 1:
        return T.reshape(x, (1, x.shape[0])), True
    return x, False


def _row_times(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return np.full(n, float(t)) if t.ndim == 0 else t.reshape(n)


def fourier_features(t: np.ndarray, k: int) -> np.ndarray:
    """``k`` sinusoidal features per time (sin/cos at octave frequencies)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = math.pi * 2.0 ** np.arange(k // 2)
    ang = t * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class ScoreNetwork:
    """Dense tanh network ``s(x, t)`` with Fourier time features.

    With ``output_scaling="sigma"`` the raw output is divided by the kernel
    std, i.e. the network predicts ``-noise``; this keeps the targets O(1)
    at every noise level.

    ``base_mean``/``base_var`` (per coordinate) add the score of the
    diffused Gaussian with those moments, so the network only learns the
    residual from that closed form.
    """

    def __init__(
        self,
        dim: int,
        hidden: Sequence[int] = (256, 256, 256, 256),
        n_fourier: int = 8,
        output_scaling: str = "sigma",
        sched: NoiseSchedule | None = None,
        rng: np.random.Generator | None = None,
        zero_last: bool = False,
        store: ParamStore | None = None,
        base_mean=None,
        base_var=None,
    ):
        if output_scaling not in ("sigma", "none"):
            raise ValueError(f"unknown output_scaling {output_scaling!r}")
        if n_fourier % 2:
            raise ValueError("n_fourier must be even")
        self.dim = int(dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.n_fourier = int(n_fourier)
        self.output_scaling = output_scaling
        self.sched = sched or NoiseSchedule()
        self.sizes = (self.dim + self.n_fourier, *self.hidden, self.dim)
        if store is None:
            store = ParamStore()
            nn.init_mlp(store, "score", self.sizes, rng if rng is not None else np.random.default_rng(0),
                        zero_last=zero_last)
        self.store = store
        self.base_mean = None if base_mean is None else np.asarray(base_mean, dtype=np.float64).reshape(self.dim)
        self.base_var = None if base_var is None else np.asarray(base_var, dtype=np.float64).reshape(self.dim)
        if (self.base_mean is None) != (self.base_var is None):
            raise ValueError("base_mean and base_var go together")
        if self.base_var is not None and np.any(self.base_var <= 0):
            raise ValueError("base_var must be positive")

    def __call__(self, x, t, params=None) -> Tensor:
        """Score at ``(x, t)``; ``params=None`` treats the weights as constants."""
        xb, squeeze = _as_batch(x)
        if xb.shape[1] != self.dim:
            raise ValueError(f"expected dim {self.dim}, got {xb.shape[1]}")
        n = xb.shape[0]
        t = _row_times(t, n)
        if params is None:
            params = self.store.leaves(trainable=False)
        h = T.concat([xb, Tensor(fourier_features(t, self.n_fourier))], axis=1)
        out = nn.mlp(params, "score", h, len(self.sizes) - 1, "tanh")
        if self.output_scaling == "sigma":
            _, sigma = alpha_beta(self.sched, t, lo=0.0)
            out = T.div(out, np.maximum(np.asarray(sigma), 1e-12).reshape(-1, 1))
        if self.base_mean is not None:
            alpha, sigma = alpha_beta(self.sched, t, lo=0.0)
            a = np.asarray(alpha).reshape(-1, 1)
            var = a * a * self.base_var + np.asarray(sigma).reshape(-1, 1) ** 2
            out = T.sub(out, T.div(T.sub(xb, a * self.base_mean), var))
        return T.reshape(out, (self.dim,)) if squeeze else out

    def save(self, path) -> None:
        tensors = dict(self.store.params)
        tensors["meta.dim"] = np.array([self.dim], dtype=np.float64)
        tensors["meta.hidden"] = np.array(self.hidden, dtype=np.float64)
        tensors["meta.n_fourier"] = np.array([self.n_fourier], dtype=np.float64)
        tensors["meta.output_scaling"] = np.array([1.0 if self.output_scaling == "sigma" else 0.0])
        tensors["meta.sde"] = np.array([self.sched.beta_min, self.sched.beta_max, self.sched.T, self.sched.eps_min])
        if self.base_mean is not None:
            tensors["meta.base_mean"] = self.base_mean
            tensors["meta.base_var"] = self.base_var
        write_container(path, tensors)

    @classmethod
    def load(cls, path) -> "ScoreNetwork":
        data = read_container(path)
        bmin, bmax, horizon, eps = data["meta.sde"]
        store = ParamStore()
        for k, v in data.items():
            if not k.startswith("meta."):
                store.add(k, v)
        return cls(
            dim=int(data["meta.dim"][0]),
            hidden=[int(h) for h in data["meta.hidden"]],
            n_fourier=int(data["meta.n_fourier"][0]),
            output_scaling="sigma" if data["meta.output_scaling"][0] else "none",
            sched=NoiseSchedule(bmin, bmax, horizon, eps),
            store=store,
            base_mean=data.get("meta.base_mean"),
            base_var=data.get("meta.base_var"),
        )


def score_eval(net, x_t, t, params=None) -> Tensor:
    if isinstance(net, ScoreNetwork):
        return net(x_t, t, params)
    return net(x_t, t)


@dataclass
class AnalyticGaussianScore:
    """Exact score of a diffused diagonal Gaussian ``N(mu0, diag(var0))``."""

    mu0: np.ndarray
    var0: np.ndarray
    sched: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=np.float64))
        self.var0 = np.broadcast_to(np.asarray(self.var0, dtype=np.float64), self.mu0.shape).copy()
        if np.any(self.var0 <= 0):
            raise ValueError("variances must be positive")

    @property
    def dim(self) -> int:
        return self.mu0.size

    def marginal(self, t):
        """Mean and variance of the diffused marginal, rows per time."""
        alpha, sigma = alpha_beta(self.sched, t, lo=0.0)
        a = np.asarray(alpha).reshape(-1, 1)
        s = np.asarray(sigma).reshape(-1, 1)
        return a * self.mu0, a * a * self.var0 + s * s

    def __call__(self, x, t) -> Tensor:
        xb, squeeze = _as_batch(x)
        t = _row_times(t, xb.shape[0])
        mean, var = self.marginal(t)
        out = T.mul(T.sub(xb, mean), -1.0 / var)
        return T.reshape(out, (self.dim,)) if squeeze else out

    def numpy(self, x, t) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        mean, var = self.marginal(np.asarray(t) if np.ndim(t) else t)
        out = -(np.atleast_2d(x) - mean) / var
        return out.reshape(x.shape)

    def log_density(self, x, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        mean, var = self.marginal(t)
        return -0.5 * np.sum((x - mean) ** 2 / var + np.log(2 * np.pi * var), axis=1)


@dataclass
class AnalyticMixtureScore:
    """Exact score of a diffused diagonal-Gaussian mixture."""

    means: np.ndarray
    variances: np.ndarray
    weights: np.ndarray
    sched: NoiseSchedule = field(default_factory=NoiseSchedule)

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k, d = self.means.shape
        self.variances = np.broadcast_to(np.asarray(self.variances, dtype=np.float64).reshape(k, -1), (k, d)).copy()
        w = np.asarray(self.weights, dtype=np.float64).reshape(k)
        if np.any(w <= 0):
            raise ValueError("weights must be positive")
        self.weights = w / w.sum()

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def _terms(self, t, n):
        alpha, sigma = alpha_beta(self.sched, _row_times(t, n), lo=0.0)
        a = alpha.reshape(-1, 1)
        s2 = (sigma ** 2).reshape(-1, 1)
        # per component: mean (n, d), var (n, d)
        return [(a * mu, a * a * v + s2) for mu, v in zip(self.means, self.variances)]

    def __call__(self, x, t) -> Tensor:
        xb, squeeze = _as_batch(x)
        n = xb.shape[0]
        terms = self._terms(t, n)
        logits, comp_scores = [], []
        for w, (m, v) in zip(self.weights, terms):
            diff = T.sub(xb, m)
            quad = T.sum_(T.mul(T.square(diff), 1.0 / v), axis=1, keepdims=True)
            const = (math.log(w) - 0.5 * np.sum(np.log(2 * np.pi * v), axis=1)).reshape(-1, 1)
            logits.append(T.add(T.scale(quad, -0.5), const))
            comp_scores.append(T.mul(diff, -1.0 / v))
        lg = T.concat(logits, axis=1)
        shift = lg.data.max(axis=1, keepdims=True)
        e = T.exp(T.sub(lg, shift))
        r = T.div(e, T.sum_(e, axis=1, keepdims=True))
        out = None
        for k, cs in enumerate(comp_scores):
            term = T.mul(T.take(r, [k], axis=1), cs)
            out = term if out is None else T.add(out, term)
        return T.reshape(out, (self.dim,)) if squeeze else out

    def log_density(self, x, t) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        terms = self._terms(t, x.shape[0])
        comps = np.stack([
            math.log(w) - 0.5 * np.sum((x - m) ** 2 / v + np.log(2 * np.pi * v), axis=1)
            for w, (m, v) in zip(self.weights, terms)
        ], axis=1)
        mx = comps.max(axis=1, keepdims=True)
        return (mx + np.log(np.exp(comps - mx).sum(axis=1, keepdims=True)))[:, 0]

    def numpy(self, x, t) -> np.ndarray:
        with T.no_grad():
            return self(x, t).data


def analytic_score_eval(oracle, x, t) -> np.ndarray:
    oracle.sched.check_time(t)
    return oracle.numpy(x, t)


# ---------------------------------------------------------------- training

def dsm_loss(net, batch, sched: NoiseSchedule, rng: np.random.Generator, params=None,
             t=None, noise=None) -> Tensor:
    """g(t)^2-weighted denoising score matching loss, averaged over the batch.

    One ``(t, noise)`` pair per row; ``t`` uniform on ``[eps_min, T]``.
    """
    x0 = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    n, d = x0.shape
    if t is None:
        t = rng.uniform(sched.eps_min, sched.T, size=n)
    if noise is None:
        noise = rng.standard_normal((n, d))
    x_t, target = diffusion.perturb(sched, x0, t, noise)
    s = score_eval(net, Tensor(x_t), t, params)
    _, g = drift_diffusion(sched, x0, t)
    per_item = T.sum_(T.square(T.sub(s, target)), axis=1)
    return T.mean(T.mul(per_item, np.asarray(g) ** 2))


@dataclass
class ScoreTrainConfig:
    lr: float = 2e-4
    lr_schedule: str = "cosine"
    batch_size: int = 64
    iterations: int = 20_000
    hidden: tuple[int, ...] = (256, 256, 256, 256)
    n_fourier: int = 8
    output_scaling: str = "sigma"
    grad_clip: float = 100.0
    holdout: int = 256
    gaussian_skip: bool = False
    log_every: int = 1000
    snapshot_every: int = 0
    checkpoint: str | None = None

    @classmethod
    def from_config(cls, cfg) -> "ScoreTrainConfig":
        out = cls()
        for key, conv in (("lr", float), ("lr_schedule", str), ("batch_size", int), ("iterations", int),
                          ("n_fourier", int), ("output_scaling", str), ("grad_clip", float),
                          ("holdout", int), ("log_every", int),
                          ("snapshot_every", int)):
            full = f"score.{key}"
            if full in cfg:
                setattr(out, key, conv(cfg[full]))
        if "score.gaussian_skip" in cfg:
            out.gaussian_skip = str(cfg["score.gaussian_skip"]).strip().lower() in ("1", "true", "yes", "on")
        if "score.hidden" in cfg:
            out.hidden = tuple(int(h) for h in str(cfg["score.hidden"]).split(","))
        return out


@dataclass
class ScoreTrainResult:
    net: ScoreNetwork
    initial_holdout_loss: float
    final_holdout_loss: float
    trace: list[tuple[int, float]]


def _holdout_loss(net, data, sched, seed: int) -> float:
    # fixed (t, noise) draws so the initial and final values are comparable
    rng = np.random.Generator(np.random.Philox(seed))
    with T.no_grad():
        return dsm_loss(net, data, sched, rng).item()


def train_score(
    dataset,
    cfg: ScoreTrainConfig,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    snapshot: Callable[[int, ScoreNetwork], None] | None = None,
) -> ScoreTrainResult:
    """Fit a :class:`ScoreNetwork` to ``dataset`` by DSM with Adam."""
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    if not np.all(np.isfinite(data)):
        raise ValueError("dataset contains non-finite values")
    n, d = data.shape
    init_rng, loop_rng = rng.spawn(2)
    base = {}
    if cfg.gaussian_skip:
        base = {"base_mean": data.mean(axis=0), "base_var": np.maximum(data.var(axis=0), 1e-6)}
    net = ScoreNetwork(d, cfg.hidden, cfg.n_fourier, cfg.output_scaling, sched, init_rng,
                       zero_last=cfg.gaussian_skip, **base)
    n_hold = min(cfg.holdout, max(n // 5, 1)) if n > 1 else 0
    perm = loop_rng.permutation(n)
    hold = data[perm[:n_hold]] if n_hold else data
    train = data[perm[n_hold:]] if n_hold else data
    hold_seed = int(loop_rng.integers(1 << 62))
    init_loss = _holdout_loss(net, hold, sched, hold_seed)
    trace: list[tuple[int, float]] = []
    for it in range(1, cfg.iterations + 1):
        idx = loop_rng.integers(0, train.shape[0], size=min(cfg.batch_size, train.shape[0]))
        params = net.store.leaves()
        try:
            loss = dsm_loss(net, train[idx], sched, loop_rng, params=params)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"non-finite value at iteration {it}: {exc}") from exc
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"DSM loss is {loss.item()} at iteration {it}")
        grads = T.backward(loss)
        grads, _ = clip_grad_norm(grads, cfg.grad_clip)
        adam_step(net.store, grads, scheduled_lr(cfg.lr, it, cfg.iterations, cfg.lr_schedule))
        trace.append((it, loss.item()))
        if cfg.log_every and it % cfg.log_every == 0:
            recent = np.mean([v for _, v in trace[-cfg.log_every:]])
            log.info("score iter %d  dsm %.5f", it, recent)
        if snapshot is not None and cfg.snapshot_every and it % cfg.snapshot_every == 0:
            snapshot(it, net)
    final_loss = _holdout_loss(net, hold, sched, hold_seed)
    if cfg.checkpoint:
        net.save(cfg.checkpoint)
    return ScoreTrainResult(net, init_loss, final_loss, trace)


def score_mse(net, oracle, sched: NoiseSchedule, box: np.ndarray, times=None, n_grid: int = 21) -> float:
    """Mean squared error per coordinate between two scores on a grid.

    ``box`` holds per-coordinate half-widths around the prior mean; times
    default to 9 points on [0.1, 0.9].
    """
    times = np.linspace(0.1, 0.9, 9) if times is None else np.asarray(times)
    box = np.asarray(box, dtype=np.float64)
    center = getattr(oracle, "mu0", np.zeros_like(box))
    axes = [np.linspace(c - b, c + b, n_grid) for c, b in zip(center, box)]
    pts = np.stack([g.reshape(-1) for g in np.meshgrid(*axes, indexing="ij")], axis=1)
    errs = []
    with T.no_grad():
        for t in times:
            errs.append(np.mean((net(pts, t).data - oracle(pts, t).data) ** 2))
    return float(np.mean(errs))
