import json

import numpy as np
import pytest

from ppgsmooth import (
    EXACT,
    AdamState,
    BackwardSamplerConfig,
    CrnnFamily,
    LearningConfig,
    LgssmFamily,
    NonFiniteGradientError,
    RngStream,
    UnsupportedParameterError,
    adam_step,
    backward_initial_path,
    fisher_functional,
    gd_est,
    ppg_iteration,
    sample_theta0,
    score_ascent_pg,
    score_ascent_ppg,
    zero_functional,
)
from ppgsmooth.compiled import sufficient_functional
from ppgsmooth.models import CrnnParams, crnn_simulate, disturbance_smooth, lgssm_simulate
from ppgsmooth.ppg import lineage_initial_path, pgas_iteration

HYBRID = BackwardSamplerConfig()


def fd_log_gm(family, theta, s, x, x_next, h=1e-5):
    """Central differences of log g_s(x) + log m_s(x, x') in theta."""
    out = np.empty(theta.size)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        vals = []
        for th in (theta + e, theta - e):
            model = family.model(th)
            vals.append(
                model.log_potential(s, x[None])[0] + model.log_transition_density(s, x[None], x_next[None])[0]
            )
        out[i] = (vals[0] - vals[1]) / (2 * h)
    return out


class ZeroScore(LgssmFamily):
    """LGSSM family whose score functional vanishes identically."""

    def score_functional(self, theta):
        return zero_functional(self.dim)


@pytest.fixture(scope="module")
def biv_family(bivariate_params):
    y = lgssm_simulate(bivariate_params, 20, 3)[1][:20]
    return LgssmFamily(bivariate_params, y)


@pytest.fixture(scope="module")
def scalar_family(scalar_params):
    y = lgssm_simulate(scalar_params, 30, 2024)[1][:30]
    return LgssmFamily(scalar_params, y)


class TestScoreFunctional:
    def test_lgssm_finite_differences(self, biv_family):
        gen = RngStream(1).generator
        for _ in range(4):
            theta = biv_family.base.theta() + 0.2 * gen.normal(size=biv_family.dim)
            x, x_next = gen.normal(size=2), gen.normal(size=2)
            s = int(gen.integers(0, 20))
            term = fisher_functional(biv_family, theta).term(s, x, x_next)
            fd = fd_log_gm(biv_family, theta, s, x, x_next)
            assert np.linalg.norm(term - fd) / np.linalg.norm(fd) < 1e-5

    def test_crnn_finite_differences(self):
        base = CrnnParams.default(RngStream(2), dim=3, dy=2)
        y = crnn_simulate(base, 5, RngStream(3))[1][:5]
        family = CrnnFamily(base, y)
        gen = RngStream(4).generator
        theta = base.theta() + 0.1 * gen.normal(size=family.dim)
        x = gen.normal(size=3)
        x_next = base.with_theta(theta).drift(x[None])[0] + 0.1 * gen.normal(size=3)
        term = fisher_functional(family, theta).term(2, x, x_next)
        fd = fd_log_gm(family, theta, 2, x, x_next)
        assert np.linalg.norm(term - fd) / np.linalg.norm(fd) < 1e-5

    def test_scalar_hand_value(self, scalar_family):
        theta = np.array([0.9, 0.5])
        term = scalar_family.score_functional(theta).term(0, np.array([0.4]), np.array([1.1]))
        assert term[0] == pytest.approx((1.1 - 0.9 * 0.4) * 0.4 / 0.36, rel=1e-12)

    def test_no_observation_term_past_data(self, scalar_family):
        term = scalar_family.score_functional(np.array([0.9, 0.5])).term(30, np.array([0.4]), np.array([1.1]))
        assert term[1] == 0.0

    def test_smoothed_expectation_vanishes_at_mle(self, scalar_family):
        mle = scalar_family.exact_mle()
        a, b = mle.A[0, 0], mle.B[0, 0]
        t = scalar_family.horizon
        sm = disturbance_smooth(mle, scalar_family.observations, t + 1)
        xx = sm.second_moments()[:, 0, 0]
        cross = sm.lag_one_second_moments()[:, 0, 0]
        y = scalar_family.observations[:, 0]
        g_a = (cross.sum() - a * xx[:t].sum()) / 0.36
        g_b = (y @ sm.means[:t, 0] - b * xx[:t].sum()) / 0.33**2
        assert np.hypot(g_a, g_b) < 1e-6

    def test_stats_route_matches_path_route(self, biv_family):
        theta = biv_family.base.theta() + 0.05
        path = RngStream(5).generator.normal(size=(21, 2))
        direct = biv_family.score_functional(theta).along_path(path)
        via_stats = biv_family.grad_from_stats(theta, biv_family.path_stats(path))
        np.testing.assert_allclose(via_stats, direct, rtol=1e-10, atol=1e-10)
        twin = sufficient_functional(2, 1, biv_family.observations).along_path(path)
        np.testing.assert_allclose(twin, biv_family.path_stats(path), rtol=1e-12)

    def test_unsupported(self, scalar_family):
        with pytest.raises(UnsupportedParameterError):
            LgssmFamily(scalar_family.base, scalar_family.observations, free=("Q",))
        with pytest.raises(UnsupportedParameterError):
            fisher_functional(object(), np.zeros(2))


class TestAdam:
    def test_zero_gradient(self):
        state, theta = adam_step(AdamState.fresh(3), np.array([1.0, -2.0, 0.5]), np.zeros(3))
        np.testing.assert_array_equal(theta, [1.0, -2.0, 0.5])
        assert state.step == 1

    def test_first_step_is_signed_rate(self):
        g = np.array([3.0, -0.01, 50.0])
        _, theta = adam_step(AdamState.fresh(3, lr=0.2), np.zeros(3), g)
        np.testing.assert_allclose(theta, 0.2 * np.sign(g), rtol=1e-5)

    def test_decayed_second_step(self):
        g = np.array([2.0])
        state, theta = adam_step(AdamState.fresh(1), np.zeros(1), g)
        _, theta = adam_step(state, theta, g)
        np.testing.assert_allclose(theta, [0.2 + 0.2 / np.sqrt(2)], rtol=1e-6)

    def test_deterministic(self):
        grads = RngStream(6).generator.normal(size=(20, 4))
        runs = []
        for _ in range(2):
            state, theta = AdamState.fresh(4), np.zeros(4)
            seq = []
            for g in grads:
                state, theta = adam_step(state, theta, g)
                seq.append(theta)
            runs.append(np.array(seq))
        np.testing.assert_array_equal(runs[0], runs[1])

    def test_non_finite(self):
        with pytest.raises(NonFiniteGradientError):
            adam_step(AdamState.fresh(2), np.zeros(2), [np.nan, 1.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step(AdamState.fresh(2), np.zeros(2), np.zeros(3))


class TestGdEst:
    def test_single_iteration(self, scalar_family):
        theta = np.array([0.9, 0.5])
        model, f = scalar_family.model(theta), scalar_family.score_functional(theta)
        path = np.zeros((31, 1))
        stats, final = gd_est(model, f, path, 1, 0, 16, 2, HYBRID, RngStream(7))
        it = ppg_iteration(model, path, 16, 2, f, HYBRID, RngStream(7))
        np.testing.assert_array_equal(stats, it.estimate[None])
        np.testing.assert_array_equal(final.states, it.new_path.states)

    def test_zero_functional(self, scalar_family):
        model = scalar_family.model(np.array([0.9, 0.5]))
        stats, _ = gd_est(model, zero_functional(2), np.zeros((31, 1)), 4, 2, 8, 2, HYBRID, RngStream(8))
        assert stats.shape == (2, 2)
        np.testing.assert_array_equal(stats, 0)

    def test_bad_burn_in(self, scalar_family):
        model = scalar_family.model(np.array([0.9, 0.5]))
        with pytest.raises(ValueError):
            gd_est(model, zero_functional(2), np.zeros((31, 1)), 2, 2, 8, 2, HYBRID, RngStream(0))

    def test_zero_mean_at_mle(self, scalar_family):
        mle = scalar_family.exact_mle()
        theta = mle.theta()
        model, f = scalar_family.model(theta), scalar_family.score_functional(theta)
        root = RngStream(9)
        grads = []
        for r in range(200):
            start = backward_initial_path(model, 30, 32, root.child("init", r))
            stats, _ = gd_est(model, f, start.states, 4, 2, 32, 2, HYBRID, root.child(r))
            grads.append(stats.mean(axis=0))
        grads = np.array(grads)
        se = grads.std(axis=0, ddof=1) / np.sqrt(len(grads))
        assert np.all(np.abs(grads.mean(axis=0)) < 3 * se)


class TestScoreAscent:
    def test_zero_gradient_keeps_theta(self, scalar_family):
        family = ZeroScore(scalar_family.base, scalar_family.observations)
        cfg = LearningConfig(iterations=3, n=8, k=2, k0=1, engine="numpy")
        for driver in (score_ascent_ppg, score_ascent_pg):
            run = driver(family, np.array([0.3, 0.2]), cfg, RngStream(10))
            np.testing.assert_array_equal(run.thetas, np.tile([0.3, 0.2], (4, 1)))

    def test_no_iterations(self, scalar_family):
        mle = scalar_family.exact_mle()
        cfg = LearningConfig(iterations=0)
        run = score_ascent_ppg(scalar_family, np.array([0.1, 0.1]), cfg, RngStream(11), mle=mle)
        assert run.iterations == 0 and run.thetas.shape == (1, 2)
        assert run.d_mle[0] == pytest.approx(scalar_family.distance(np.array([0.1, 0.1]), mle))

    @pytest.mark.parametrize("engine", ["numpy", "compiled"])
    def test_reproducible(self, scalar_family, engine):
        cfg = LearningConfig(iterations=4, n=16, k=4, k0=2, engine=engine)
        a = score_ascent_ppg(scalar_family, np.array([0.1, 0.1]), cfg, RngStream(12))
        b = score_ascent_ppg(scalar_family, np.array([0.1, 0.1]), cfg, RngStream(12))
        np.testing.assert_array_equal(a.thetas, b.thetas)
        assert a.thetas.shape == (5, 2) and a.grads.shape == (4, 2) and len(a.grad_norms) == 4

    def test_pg_final_path_gradient(self, scalar_family):
        # with k0 = k - 1 the gradient is the score along the last PGAS path
        cfg = LearningConfig(iterations=1, n=8, k=3, k0=2, engine="numpy", rescale=False)
        theta0 = np.array([0.4, 0.3])
        rng = RngStream(13)
        run = score_ascent_pg(scalar_family, theta0, cfg, rng)
        model = scalar_family.model(theta0)
        path = lineage_initial_path(model, 30, 8, rng.child("init")).states
        steps = rng.child("steps").child(0)
        for ell in range(3):
            path = pgas_iteration(model, path, 8, steps.child(ell)).states
        expected = scalar_family.score_functional(theta0).along_path(path)
        np.testing.assert_allclose(run.grads[0], expected)

    def test_cold_start_and_records(self, scalar_family, tmp_path):
        cfg = LearningConfig(iterations=2, n=8, k=2, k0=1, warm_start=False)
        mle = scalar_family.exact_mle()
        run = score_ascent_ppg(scalar_family, np.array([0.2, 0.2]), cfg, RngStream(14), mle=mle)
        run.write_csv(tmp_path / "run.csv", timing=True)
        run.write_snapshot(tmp_path / "run.json")
        lines = (tmp_path / "run.csv").read_text().splitlines()
        assert lines[0] == "iteration,theta_0,theta_1,grad_norm,d_mle,wall_ms"
        assert len(lines) == 4
        snap = json.loads((tmp_path / "run.json").read_text())
        assert snap["config"]["adam"] == dict(lr=0.2, beta1=0.9, beta2=0.999, eps=1e-8, decay=True)
        assert snap["config"]["rescale_by"] == 30

    def test_score_decreases(self, scalar_params):
        y = lgssm_simulate(scalar_params, 100, 2024)[1][:100]
        family = LgssmFamily(scalar_params, y)
        cfg = LearningConfig(iterations=100, n=64, k=8, k0=4)
        better = 0
        for seed in range(10):
            theta0 = sample_theta0(2, RngStream(15, (seed,)))
            run = score_ascent_ppg(family, theta0, cfg, RngStream(16, (seed,)))
            better += np.linalg.norm(family.exact_score(run.final_theta)) < np.linalg.norm(family.exact_score(theta0))
        assert better >= 9

    def test_config_validation(self, scalar_family):
        for bad in (dict(iterations=-1), dict(k=2, k0=2), dict(n=0), dict(engine="gpu")):
            with pytest.raises(ValueError):
                LearningConfig(**bad)
        base = CrnnParams.default(RngStream(0), dim=2, dy=2)
        family = CrnnFamily(base, np.zeros((3, 2)))
        with pytest.raises(UnsupportedParameterError):
            score_ascent_ppg(family, base.theta(), LearningConfig(iterations=1, engine="compiled"), RngStream(0))


def test_theta0_covariance():
    draws = np.array([sample_theta0(3, RngStream(17, (i,))) for i in range(20_000)])
    np.testing.assert_allclose(draws.var(axis=0), 0.01, rtol=0.05)
    np.testing.assert_allclose(draws.mean(axis=0), 0.0, atol=0.003)
