"""Toy experiment drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..diffusion import NoiseSchedule
from ..distill import DistillConfig, condition_dim, distill_train
from ..flow import ConditionalFlow
from ..operators import MeasurementSet, dataset_shape, gen_toy_dataset, matrix_operator, measure_dataset, parse_operator
from ..score import AnalyticGaussianScore, ScoreTrainConfig, train_score
from ..tensorcore.rng import split
from .metrics import psnr
from .oracle import ConjugatePosterior, conjugate_posterior


@dataclass
class LinearGaussianProblem:
    """Gaussian prior, one linear measurement row, Gaussian noise."""

    mu0: np.ndarray = field(default_factory=lambda: np.array([0.5, -0.3]))
    var0: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.5]))
    a: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.5]]))
    sigma_y: float = 0.5
    sched: NoiseSchedule = field(default_factory=NoiseSchedule)

    @property
    def score(self) -> AnalyticGaussianScore:
        return AnalyticGaussianScore(self.mu0, self.var0, self.sched)

    def posterior(self, y) -> ConjugatePosterior:
        return conjugate_posterior(self.mu0, self.var0, self.a, self.sigma_y, np.atleast_1d(y))

    def measurements(self, n: int, rng: np.random.Generator, exclude=(), radius: float = 0.0) -> MeasurementSet:
        """``n`` measurements of prior draws, dropping any ``y`` within ``radius`` of ``exclude``."""
        xs = self.mu0 + rng.standard_normal((n, self.mu0.size)) * np.sqrt(self.var0)
        mset = measure_dataset(matrix_operator(self.a), xs, self.sigma_y, rng)
        if len(exclude) and radius > 0:
            dist = np.min(np.abs(mset.y[:, :1] - np.asarray(exclude)[None, :]), axis=1)
            mset = mset.subset(np.flatnonzero(dist > radius))
        return mset


def distill_linear_gaussian(problem: LinearGaussianProblem, mset: MeasurementSet, rng: np.random.Generator,
                            cfg: DistillConfig | None = None, steps: int = 4,
                            hidden_width: int = 32) -> ConditionalFlow:
    """Distill the analytic prior of ``problem`` into a conditional flow."""
    cfg = cfg or DistillConfig(lr=1e-3, lr_schedule="cosine", batch_size=256, iterations=12000, log_every=0)
    init_rng, train_rng = split(rng, 2)
    flow = ConditionalFlow(problem.mu0.size, mset.y.shape[1], steps=steps, hidden_width=hidden_width,
                           hidden_layers=2, rng=init_rng)
    distill_train(flow, problem.score, mset, cfg, problem.sched, train_rng)
    return flow


def moment_errors(mean: np.ndarray, cov: np.ndarray, post: ConjugatePosterior) -> tuple[float, float]:
    """Max per-coordinate mean error and relative Frobenius covariance error."""
    err_mean = float(np.max(np.abs(mean - post.mean)))
    err_cov = float(np.linalg.norm(cov - post.cov) / np.linalg.norm(post.cov))
    return err_mean, err_cov


@dataclass
class ImputationSetup:
    score: object
    flow: ConditionalFlow
    test: MeasurementSet
    truth: np.ndarray
    condition_mode: str


def imputation_experiment(kind: str, op_spec: str, sigma_y: float, rng: np.random.Generator,
                          n_train: int = 2000, n_test: int = 100,
                          score_cfg: ScoreTrainConfig | None = None,
                          distill_cfg: DistillConfig | None = None,
                          flow_steps: int = 4, flow_width: int = 64,
                          sched: NoiseSchedule | None = None) -> ImputationSetup:
    """Train a score on clean samples, distill it over measurements, hold out a test split.

    Ground truth of the distillation split is never passed to the flow; it
    is only used to fit the score prior, as a pre-trained model would be.
    """
    sched = sched or NoiseSchedule()
    data_rng, meas_rng, score_rng, flow_rng, test_rng = split(rng, 5)
    clean = gen_toy_dataset(kind, n_train, data_rng)
    score_cfg = score_cfg or ScoreTrainConfig(hidden=(128, 128, 128), iterations=4000, lr=1e-3,
                                              gaussian_skip=True, log_every=0)
    score = train_score(clean, score_cfg, sched, score_rng).net
    factory = parse_operator(op_spec, dataset_shape(kind))
    mset = measure_dataset(factory, clean, sigma_y, meas_rng)
    distill_cfg = distill_cfg or DistillConfig(lr=1e-3, lr_schedule="cosine", iterations=2000, log_every=0)
    init_rng, train_rng = split(flow_rng, 2)
    flow = ConditionalFlow(clean.shape[1], condition_dim(mset, distill_cfg.condition_mode), steps=flow_steps,
                           hidden_width=flow_width, hidden_layers=2, rng=init_rng)
    distill_train(flow, score, mset, distill_cfg, sched, train_rng)
    truth = gen_toy_dataset(kind, n_test, test_rng)
    test = measure_dataset(factory, truth, sigma_y, test_rng)
    return ImputationSetup(score, flow, test, truth, distill_cfg.condition_mode)


def masked_input_psnr(mset: MeasurementSet, truth: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """PSNR of the zero-filled measurement itself, per row."""
    return np.array([psnr(mset.y[i], truth[i], peak) for i in range(len(mset))])
