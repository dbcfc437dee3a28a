import math

import numpy as np
import pytest
from scipy import stats

from conftest import dense_posterior, dense_prior, enumerate_paths
from ppgsmooth import RngStream
from ppgsmooth.errors import SingularCovarianceError
from ppgsmooth.models import (
    CrnnParams,
    DiscreteHmm,
    LgssmModel,
    LgssmParams,
    crnn_model,
    crnn_simulate,
    discrete_fb_smooth,
    disturbance_smooth,
    kalman_filter,
    lag_one_reference,
    lgssm_exact_mle,
    lgssm_exact_score,
    lgssm_loglik,
    lgssm_simulate,
    sample_smoothing_path,
    student_t_logpdf,
)
from ppgsmooth.models.lgssm import em_step


def dense_loglik(params, y):
    """log N(y; H m, H C H^T + I (x) RR^T) for the stacked record."""
    n = len(y)
    mean, cov = dense_prior(params, n)
    H = np.kron(np.eye(n), params.B)
    cy = H @ cov @ H.T + np.kron(np.eye(n), params.obs_cov)
    return stats.multivariate_normal(H @ mean, cy).logpdf(np.ravel(y))


class TestSimulate:
    def test_constant_path_without_state_noise(self):
        params = LgssmParams.scalar(1.0, 0.0, 1.0, 0.5)
        x, _ = lgssm_simulate(params, 20, 1)
        np.testing.assert_array_equal(x - x[0], 0)

    def test_exact_observations_without_noise(self, bivariate_params):
        from dataclasses import replace

        params = replace(bivariate_params, R=np.zeros((1, 1)))
        x, y = lgssm_simulate(params, 15, 2)
        np.testing.assert_allclose(y, x @ params.B.T, atol=1e-15)

    def test_benchmark_record_shape(self, scalar_params):
        x, y = lgssm_simulate(scalar_params, 999, 2024)
        assert x.shape == y.shape == (1000, 1)
        np.testing.assert_array_equal(y, lgssm_simulate(scalar_params, 999, 2024)[1])

    def test_params_validation(self):
        with pytest.raises(ValueError):
            LgssmParams(np.ones((2, 3)), np.eye(2), np.ones((1, 2)), [[1.0]])


class TestModelDensities:
    def test_density_peak_is_upper_bound(self, bivariate_params):
        model = LgssmModel(bivariate_params, np.zeros((3, 1)))
        x = np.array([[0.3, -0.2]])
        peak = model.log_transition_density(0, x, x @ bivariate_params.A.T)
        np.testing.assert_allclose(peak, model.log_transition_density_upper(0))

    def test_potential_symmetric(self, bivariate_params):
        model = LgssmModel(bivariate_params, np.array([[0.7]]))
        x = np.array([[0.2, 0.1]])
        r = 0.7 - (x @ bivariate_params.B.T)[0, 0]
        # a state whose prediction sits on the other side of y
        x2 = x + np.array([[2 * r / bivariate_params.B[0, 0], 0.0]])
        np.testing.assert_allclose(model.log_potential(0, x), model.log_potential(0, x2))

    def test_against_quadratic_form(self, bivariate_params):
        p = bivariate_params
        y = np.array([[0.4], [-1.2]])
        model = LgssmModel(p, y)
        gen = RngStream(3).generator
        x, x_next = gen.normal(size=(5, 2)), gen.normal(size=(5, 2))
        for a, b in zip(x, x_next):
            r = b - p.A @ a
            direct = stats.multivariate_normal(np.zeros(2), p.state_cov).logpdf(r)
            np.testing.assert_allclose(model.log_transition_density(0, a[None], b[None])[0], direct, atol=1e-12)
            pot = stats.norm(0, math.sqrt(p.obs_cov[0, 0])).logpdf(y[1, 0] - p.B[0] @ a)
            np.testing.assert_allclose(model.log_potential(1, a[None])[0], pot, atol=1e-12)

    def test_no_potential_past_data(self, bivariate_params):
        model = LgssmModel(bivariate_params, np.zeros((2, 1)))
        np.testing.assert_array_equal(model.log_potential(2, np.ones((4, 2))), 0)

    def test_singular_covariance(self):
        with pytest.raises(SingularCovarianceError):
            LgssmModel(LgssmParams.scalar(1.0, 0.0, 1.0, 1.0), np.zeros((2, 1)))


class TestKalman:
    def test_noise_free_observation(self):
        params = LgssmParams(np.eye(2) * 0.9, np.eye(2), np.eye(2), np.eye(2) * 1e-9)
        y = np.array([[0.3, -1.0], [2.0, 0.5]])
        np.testing.assert_allclose(kalman_filter(params, y).means, y, atol=1e-9)

    def test_conjugate_update(self):
        res = kalman_filter(LgssmParams.scalar(0.5, 1.0, 1.0, 1.0), [[1.4]])
        np.testing.assert_allclose(res.means[0], [0.7])
        np.testing.assert_allclose(res.covs[0], [[0.5]])

    @pytest.mark.parametrize("which", ["scalar", "bivariate"])
    def test_loglik_dense(self, which, scalar_params, bivariate_params):
        params = scalar_params if which == "scalar" else bivariate_params
        y = lgssm_simulate(params, 10, 5)[1][:10]
        assert abs(kalman_filter(params, y).loglik - dense_loglik(params, y)) < 1e-8

    def test_short_state_count(self, scalar_params):
        with pytest.raises(ValueError):
            kalman_filter(scalar_params, np.zeros((5, 1)), n_states=3)


class TestSmoother:
    def test_single_time(self, scalar_params):
        y = [[0.8]]
        sm = disturbance_smooth(scalar_params, y)
        f = kalman_filter(scalar_params, y)
        np.testing.assert_allclose(sm.means, f.means)
        np.testing.assert_allclose(sm.covs, f.covs)

    def test_constant_state(self):
        params = LgssmParams.scalar(1.0, 0.0, 1.0, 1.0)
        sm = disturbance_smooth(params, [[0.5], [1.0], [-0.2], [0.9]])
        np.testing.assert_allclose(sm.means - sm.means[0], 0, atol=1e-12)
        np.testing.assert_allclose(sm.lag_one_covs, sm.covs[:-1], atol=1e-12)

    @pytest.mark.parametrize("which, extra", [("scalar", 0), ("bivariate", 0), ("bivariate", 1)])
    def test_dense_oracle(self, which, extra, scalar_params, bivariate_params):
        params = scalar_params if which == "scalar" else bivariate_params
        y = lgssm_simulate(params, 20, 6)[1][:20]
        n = 20 + extra
        sm = disturbance_smooth(params, y, n)
        mean, cov = dense_posterior(params, y, n)
        d = params.dx
        blocks = cov.reshape(n, d, n, d)
        np.testing.assert_allclose(sm.means, mean, atol=1e-8)
        np.testing.assert_allclose(sm.covs, [blocks[s, :, s, :] for s in range(n)], atol=1e-8)
        np.testing.assert_allclose(sm.lag_one_covs, [blocks[s, :, s + 1, :] for s in range(n - 1)], atol=1e-8)
        assert np.all(np.linalg.eigvalsh(sm.covs) >= -1e-12)

    def test_lag_one_reference(self, bivariate_params):
        y = lgssm_simulate(bivariate_params, 12, 7)[1]
        mean, cov = dense_posterior(bivariate_params, y[:12], 13)
        blocks = cov.reshape(13, 2, 13, 2)
        expected = sum(blocks[s, :, s + 1, :] + np.outer(mean[s], mean[s + 1]) for s in range(12))
        np.testing.assert_allclose(lag_one_reference(bivariate_params, y, 12), expected.ravel(), atol=1e-8)


class TestScoreAndEm:
    def test_finite_differences(self, bivariate_params):
        y = lgssm_simulate(bivariate_params, 30, 8)[1][:30]
        theta = bivariate_params.theta()
        score = lgssm_exact_score(bivariate_params, y)
        fd = np.empty_like(theta)
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = 1e-5
            up = lgssm_loglik(bivariate_params.with_theta(theta + e), y)
            down = lgssm_loglik(bivariate_params.with_theta(theta - e), y)
            fd[i] = (up - down) / 2e-5
        assert np.linalg.norm(score - fd) / np.linalg.norm(fd) < 1e-5

    def test_scalar_hand_formula(self, scalar_params):
        params = scalar_params.with_theta([0.8, 0.7])
        y = lgssm_simulate(scalar_params, 25, 9)[1][:25]
        mean, cov = dense_posterior(params, y, 25)
        m = mean[:, 0]
        second = np.diag(cov) + m * m
        cross = np.diag(cov, 1) + m[:-1] * m[1:]
        q2, r2 = 0.6**2, 0.33**2
        g_a = (cross.sum() - 0.8 * second[:-1].sum()) / q2
        g_b = (y[:, 0] @ m - 0.7 * second.sum()) / r2
        np.testing.assert_allclose(lgssm_exact_score(params, y), [g_a, g_b], rtol=1e-8)

    def test_em_monotone_and_stationary(self, scalar_params):
        y = lgssm_simulate(scalar_params, 200, 10)[1][:200]
        start = scalar_params.with_theta([0.5, 1.0])
        fit, ll = lgssm_exact_mle(start, y, iters=100)
        assert np.all(np.diff(ll) >= -1e-9)
        fit, _ = lgssm_exact_mle(fit, y, iters=1000)
        assert np.linalg.norm(lgssm_exact_score(fit, y)) < 1e-6
        again = em_step(fit, y)
        assert np.max(np.abs(again.theta() - fit.theta())) < 1e-8

    def test_em_requires_iterations(self, scalar_params):
        with pytest.raises(ValueError):
            lgssm_exact_mle(scalar_params, np.zeros((3, 1)), iters=0)


class TestCrnn:
    def test_pure_noise_transition(self):
        params = CrnnParams(W=np.zeros((3, 3)), B=np.eye(3), tau=1.0, delta=1.0)
        np.testing.assert_allclose(params.drift(np.array([[0.4, -2.0, 1.0]])), 0.0)

    def test_student_t_at_zero(self):
        ref = math.lgamma(1.5) - math.lgamma(1.0) - 0.5 * math.log(2 * math.pi) - math.log(0.1)
        np.testing.assert_allclose(student_t_logpdf(0.0, 2.0, 0.1), ref, rtol=1e-14)
        r = np.linspace(-3, 3, 7)
        np.testing.assert_allclose(student_t_logpdf(r, 2.0, 0.1), stats.t(2.0, scale=0.1).logpdf(r), rtol=1e-12)

    def test_zero_noise_orbit(self):
        params = CrnnParams.default(RngStream(1), dim=4, dy=2)
        x, y = crnn_simulate(params, 10, RngStream(2), noise=False)
        manual = np.zeros((11, 4))
        for m in range(1, 11):
            manual[m] = params.drift(manual[m - 1])
        np.testing.assert_allclose(x, manual)
        np.testing.assert_allclose(y, x @ params.B.T)
        np.testing.assert_array_equal(x, crnn_simulate(params, 10, RngStream(99), noise=False)[0])

    def test_transition_density_integrates_to_one(self):
        params = CrnnParams.default(RngStream(3), dim=2, dy=2)
        model = crnn_model(params, np.zeros((1, 2)))
        x = np.array([[0.5, -0.3]])
        centre = params.drift(x)[0]
        half = 0.6  # six standard deviations
        pts = centre + RngStream(4).generator.uniform(-half, half, size=(100_000, 2))
        vals = np.exp(model.log_transition_density(0, x, pts)) * (2 * half) ** 2
        assert abs(vals.mean() - 1.0) < 3 * vals.std(ddof=1) / math.sqrt(vals.size)

    def test_potential_is_product_of_t(self):
        params = CrnnParams.default(RngStream(5), dim=3, dy=2)
        y = np.array([[0.2, -0.1]])
        model = crnn_model(params, y)
        x = np.array([[0.1, 0.2, -0.3]])
        r = y[0] - x[0] @ params.B.T
        np.testing.assert_allclose(model.log_potential(0, x), stats.t(2.0, scale=0.1).logpdf(r).sum())

    def test_invalid(self):
        with pytest.raises(ValueError):
            CrnnParams(W=np.eye(2), B=np.ones((1, 3)))
        with pytest.raises(ValueError):
            CrnnParams(W=np.eye(2), B=np.eye(2), tau=0.0)


class TestDiscrete:
    def test_flat_model(self):
        hmm = DiscreteHmm(np.full((3, 3), 1 / 3), np.ones((4, 3)), np.full(3, 1 / 3))
        np.testing.assert_allclose(discrete_fb_smooth(hmm, 3).marginals, 1 / 3)

    def test_single_state(self):
        hmm = DiscreteHmm([[1.0]], [[0.3], [0.2]], [1.0])
        np.testing.assert_allclose(discrete_fb_smooth(hmm, 2).marginals, 1.0)

    def test_enumeration(self):
        hmm = DiscreteHmm([[0.6, 0.4], [0.25, 0.75]], [[0.9, 0.2], [0.3, 0.7]], [0.4, 0.6])
        paths, w = enumerate_paths(hmm, 2)
        assert len(paths) == 8
        res = discrete_fb_smooth(hmm, 2)
        for s in range(3):
            np.testing.assert_allclose(res.marginals[s], [w[paths[:, s] == k].sum() for k in range(2)], atol=1e-14)
        for s in range(2):
            pair = np.zeros((2, 2))
            np.add.at(pair, (paths[:, s], paths[:, s + 1]), w)
            np.testing.assert_allclose(res.pairwise[s], pair, atol=1e-14)

    def test_exact_path_sampler(self, small_hmm):
        exact = discrete_fb_smooth(small_hmm, 4).marginals
        root = RngStream(6)
        draws = np.array([sample_smoothing_path(small_hmm, 4, root.child(r))[:, 0] for r in range(20_000)]).astype(int)
        for s in range(5):
            counts = np.bincount(draws[:, s], minlength=3)
            assert stats.chisquare(counts, 20_000 * exact[s]).pvalue > 1e-3

    @pytest.mark.parametrize(
        "args",
        [([[0.5, 0.6], [0.5, 0.5]], [[1, 1]], [0.5, 0.5]), ([[1.0]], [[-1.0]], [1.0]), ([[1.0]], [[1.0]], [0.5])],
    )
    def test_validation(self, args):
        with pytest.raises(ValueError):
            DiscreteHmm(*args)
