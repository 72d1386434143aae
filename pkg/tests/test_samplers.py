import math

import numpy as np
import pytest

from ampost.diffusion import NoiseSchedule
from ampost.harness.oracle import gaussian_flow_loglik
from ampost.operators import Measurement, identity
from ampost.samplers import (
    SamplerConfig,
    SolverError,
    dps_sample,
    elbo_full,
    pf_ode_loglik,
    pf_ode_trajectory,
    reverse_sde_sample,
    score_divergence,
)
from ampost.score import AnalyticGaussianScore, ScoreNetwork

SCHED = NoiseSchedule()
STD_NORMAL = AnalyticGaussianScore([0.0], [1.0], SCHED)


def _philox(seed):
    return np.random.Generator(np.random.Philox(seed))


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SamplerConfig(steps=0)
        with pytest.raises(ValueError):
            SamplerConfig(zeta=-1.0)
        with pytest.raises(ValueError):
            SamplerConfig(integrator="heun")


class TestReverseSDE:
    def test_standard_normal_moments(self):
        n = 10_000
        xs = reverse_sde_sample(STD_NORMAL, SCHED, SamplerConfig(steps=1000), _philox(0), n=n)[:, 0]
        assert abs(xs.mean()) < 3 / math.sqrt(n)
        assert abs(xs.var(ddof=1) - 1) < 3 * math.sqrt(2 / n)

    def test_shifted_anisotropic_moments(self):
        mu, var = np.array([0.5, -0.3]), np.array([1.0, 0.01])
        n = 10_000
        xs = reverse_sde_sample(AnalyticGaussianScore(mu, var, SCHED), SCHED, SamplerConfig(steps=1000), _philox(1), n=n)
        assert np.all(np.abs(xs.mean(axis=0) - mu) < 3 * np.sqrt(var / n) + 2e-3)
        assert np.all(np.abs(xs.var(axis=0, ddof=1) / var - 1) < 3 * math.sqrt(2 / n) + 0.02)

    def test_fixed_seed(self):
        cfg = SamplerConfig(steps=50)
        a = reverse_sde_sample(STD_NORMAL, SCHED, cfg, _philox(2), n=5)
        b = reverse_sde_sample(STD_NORMAL, SCHED, cfg, _philox(2), n=5)
        assert a.tobytes() == b.tobytes()

    def test_noise_free_limit_follows_probability_flow(self):
        score = AnalyticGaussianScore([0.5, -0.3], [1.0, 0.5], SCHED)
        euler = reverse_sde_sample(score, SCHED, SamplerConfig(steps=4000, probability_flow=True), _philox(3), n=20)
        x_T = _philox(3).standard_normal((20, 2))
        ref = pf_ode_trajectory(score, SCHED, x_T, steps=1000)
        # first-order scheme: error shrinks with the step size
        assert np.max(np.abs(euler - ref)) < 5e-3
        coarse = reverse_sde_sample(score, SCHED, SamplerConfig(steps=500, probability_flow=True), _philox(3), n=20)
        assert np.max(np.abs(euler - ref)) < np.max(np.abs(coarse - ref))

    def test_probability_flow_maps_to_data_quantiles(self):
        # for a Gaussian prior the flow is affine: x_T quantiles map to prior quantiles
        mu, var = np.array([0.5]), np.array([0.25])
        score = AnalyticGaussianScore(mu, var, SCHED)
        x_T = np.array([[-1.0], [0.0], [2.0]])
        x0 = pf_ode_trajectory(score, SCHED, x_T)
        m_T, v_T = score.marginal(SCHED.T)
        m_e, v_e = score.marginal(SCHED.eps_min)
        expected = m_e + np.sqrt(v_e / v_T) * (x_T - m_T)
        np.testing.assert_allclose(x0, expected, atol=1e-8)


class TestDPS:
    def test_zero_guidance_matches_unconditional(self):
        meas = Measurement(np.array([2.0]), identity(1), 1.0)
        a = dps_sample(STD_NORMAL, SCHED, meas, None, SamplerConfig(steps=100, zeta=0.0), _philox(4), n=3)
        b = reverse_sde_sample(STD_NORMAL, SCHED, SamplerConfig(steps=100), _philox(4), n=3)
        assert a.tobytes() == b.tobytes()

    def test_huge_noise_approaches_unconditional(self):
        meas = Measurement(np.array([2.0]), identity(1), 1e8)
        a = dps_sample(STD_NORMAL, SCHED, meas, None, SamplerConfig(steps=100), _philox(5), n=3)
        b = reverse_sde_sample(STD_NORMAL, SCHED, SamplerConfig(steps=100), _philox(5), n=3)
        assert np.max(np.abs(a - b)) < 1e-10

    def test_conjugate_mean_and_step_trend(self):
        # prior N(0,1), y = x + n, sigma_y = 1, y = 2: posterior N(1, 1/2)
        meas = Measurement(np.array([2.0]), identity(1), 1.0)
        n = 2000
        fine = dps_sample(STD_NORMAL, SCHED, meas, None, SamplerConfig(steps=1000, zeta=1.2e-3), _philox(6), n=n)
        coarse = dps_sample(STD_NORMAL, SCHED, meas, None, SamplerConfig(steps=20, zeta=1.2e-3), _philox(7), n=n)
        err_fine = abs(fine.mean() - 1.0)
        err_coarse = abs(coarse.mean() - 1.0)
        assert err_fine < 0.1
        assert err_coarse > err_fine + 3 * math.sqrt(0.5 / n)

    def test_guidance_through_learned_network(self):
        score = ScoreNetwork(2, hidden=(8,), sched=SCHED, rng=np.random.default_rng(0))
        meas = Measurement(np.array([0.5, 0.5]), identity(2), 0.1)
        xs = dps_sample(score, SCHED, meas, None, SamplerConfig(steps=20), _philox(8), n=4)
        assert xs.shape == (4, 2) and np.all(np.isfinite(xs))

    def test_blind_measurement_rejected(self):
        meas = Measurement(np.array([1.0]), None, 0.1)
        with pytest.raises(ValueError):
            dps_sample(STD_NORMAL, SCHED, meas, None, SamplerConfig(steps=5), _philox(0))


class TestLikelihood:
    def test_standard_normal_at_origin(self):
        val = pf_ode_loglik(STD_NORMAL, SCHED, np.zeros(1))[0]
        assert val == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-3)

    def test_gaussian_matches_pushforward_density(self):
        mu, var = np.array([0.5, -0.3]), np.array([1.0, 0.5])
        score = AnalyticGaussianScore(mu, var, SCHED)
        pts = mu + np.random.default_rng(9).standard_normal((50, 2)) * np.sqrt(var) * 1.5
        got = pf_ode_loglik(score, SCHED, pts)
        np.testing.assert_allclose(got, gaussian_flow_loglik(mu, var, SCHED, pts), atol=1e-3)
        # the diffused data density differs only through the terminal mismatch
        assert np.max(np.abs(got - score.log_density(pts, SCHED.eps_min))) < 2e-2

    def test_monotone_along_ray(self):
        mu, var = np.array([0.5, -0.3]), np.array([1.0, 0.5])
        score = AnalyticGaussianScore(mu, var, SCHED)
        direction = np.array([0.6, 0.8])
        pts = mu + np.linspace(0, 3, 7)[:, None] * direction
        assert np.all(np.diff(pf_ode_loglik(score, SCHED, pts)) < 0)

    def test_divergence_matches_differences(self):
        score = ScoreNetwork(3, hidden=(8, 8), sched=SCHED, rng=np.random.default_rng(1))
        x = np.random.default_rng(2).standard_normal((2, 3))
        s, div = score_divergence(score, x, 0.4)
        h = 1e-6
        fd = np.zeros(2)
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            fd += (score(x + e, 0.4).data[:, i] - score(x - e, 0.4).data[:, i]) / (2 * h)
        np.testing.assert_allclose(div, fd, rtol=1e-6, atol=1e-8)
        np.testing.assert_array_equal(s, score(x, 0.4).data)

    def test_dimension_limit(self):
        with pytest.raises(ValueError):
            pf_ode_loglik(AnalyticGaussianScore(np.zeros(17), 1.0, SCHED), SCHED, np.zeros(17))

    def test_step_budget(self):
        with pytest.raises(SolverError):
            pf_ode_loglik(STD_NORMAL, SCHED, np.zeros(1), max_steps=2)


class TestLowerBound:
    def test_tight_when_terminal_matches_reference(self):
        # N(0,1) data diffuses to exactly N(0,1), so the bound is an equality
        for x0 in (0.0, 1.5):
            mean, se = elbo_full(STD_NORMAL, SCHED, np.array([x0]), 200_000, _philox(10))
            exact = -0.5 * x0 * x0 - 0.5 * math.log(2 * math.pi)
            assert abs(mean - exact) < 3 * se

    def test_below_likelihood(self):
        mu, var = np.array([0.5, -0.3]), np.array([1.0, 0.5])
        score = AnalyticGaussianScore(mu, var, SCHED)
        pts = mu + np.random.default_rng(11).standard_normal((3, 2))
        ll = pf_ode_loglik(score, SCHED, pts)
        for p, ref in zip(pts, ll):
            mean, se = elbo_full(score, SCHED, p, 100_000, _philox(12))
            assert mean <= ref + 3 * se
