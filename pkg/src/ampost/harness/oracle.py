"""Closed-form Gaussian posterior for linear measurements of a Gaussian prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ConjugatePosterior:
    mean: np.ndarray
    cov: np.ndarray


def conjugate_posterior(mu0, cov0, a, sigma_y: float, y) -> ConjugatePosterior:
    """Posterior of ``x ~ N(mu0, cov0)`` given ``y = a x + N(0, sigma_y^2 I)``.

    ``cov0`` may be a vector of variances or a full matrix.
    """
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=np.float64))
    cov0 = np.asarray(cov0, dtype=np.float64)
    if cov0.ndim <= 1:
        cov0 = np.diag(np.broadcast_to(cov0, mu0.shape))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    try:
        np.linalg.cholesky(cov0)
        prec0 = np.linalg.inv(cov0)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("prior covariance is singular or not positive definite") from exc
    prec = prec0 + a.T @ a / sigma_y ** 2
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (prec0 @ mu0 + a.T @ y / sigma_y ** 2)
    return ConjugatePosterior(mean, cov)


def gaussian_flow_loglik(mu0, var0, sched, x) -> np.ndarray:
    """Exact log density that the probability-flow model assigns to ``x``.

    For a diagonal Gaussian prior every marginal ``p_t`` is Gaussian and the
    flow map from ``eps_min`` to ``T`` is affine per coordinate, so the model
    density is ``N(x_T; 0, I)`` times the Jacobian of that map.  It differs
    from ``p_eps`` only through ``p_T != N(0, I)``.
    """
    from ..diffusion import alpha_beta

    mu0 = np.asarray(mu0, dtype=np.float64)
    var0 = np.broadcast_to(np.asarray(var0, dtype=np.float64), mu0.shape)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a_e, s_e = alpha_beta(sched, sched.eps_min)
    a_t, s_t = alpha_beta(sched, sched.T)
    v_e = a_e ** 2 * var0 + s_e ** 2
    v_t = a_t ** 2 * var0 + s_t ** 2
    x_t = a_t * mu0 + np.sqrt(v_t / v_e) * (x - a_e * mu0)
    d = mu0.size
    return (-0.5 * np.sum(x_t ** 2, axis=1) - 0.5 * d * np.log(2 * np.pi)
            + 0.5 * np.sum(np.log(v_t / v_e)))
