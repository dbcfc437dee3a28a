import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ppgsmooth.core import StateSpaceModel
from ppgsmooth.models import DiscreteHmm, LgssmParams, lgssm_simulate, benchmark_scalar_params

settings.register_profile(
    "pkg", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("pkg")


@pytest.fixture(scope="session")
def scalar_params():
    return benchmark_scalar_params()


@pytest.fixture(scope="session")
def scalar_obs(scalar_params):
    """Thirty observations y_0..y_29 of the scalar model."""
    return lgssm_simulate(scalar_params, 30, 2024)[1][:30]


@pytest.fixture(scope="session")
def bivariate_params():
    return LgssmParams(
        [[0.8, 0.1], [-0.2, 0.7]],
        [[0.5, 0.0], [0.1, 0.4]],
        [[1.0, 0.3]],
        [[0.4]],
        [0.2, -0.1],
        [[1.0, 0.2], [0.2, 0.5]],
    )


@pytest.fixture(scope="session")
def small_hmm():
    return DiscreteHmm(
        [[0.7, 0.2, 0.1], [0.15, 0.7, 0.15], [0.1, 0.3, 0.6]],
        [[0.9, 0.3, 0.1], [0.2, 0.8, 0.3], [0.1, 0.4, 0.9], [0.5, 0.5, 0.2], [0.3, 0.6, 0.7]],
        [0.5, 0.3, 0.2],
    )


def enumerate_paths(hmm, horizon):
    """All state paths with their normalised smoothing probabilities."""
    k = hmm.n_states
    grids = np.stack(np.meshgrid(*[np.arange(k)] * (horizon + 1), indexing="ij"), -1).reshape(-1, horizon + 1)
    w = hmm.initial[grids[:, 0]].copy()
    for s in range(horizon):
        w *= hmm.potentials(s)[grids[:, s]] * hmm.transition[grids[:, s], grids[:, s + 1]]
    return grids, w / w.sum()


class TableModel(StateSpaceModel):
    """Finite labels with a prescribed transition density table and potentials.

    Sampling uses the row-normalised table, so the density is only required
    to be proportional to a transition law row by row.
    """

    state_dim = 1

    def __init__(self, density, potentials, initial=None, bound=True):
        self.density = np.asarray(density, dtype=float)
        self.pot = np.asarray(potentials, dtype=float)
        k = self.density.shape[0]
        self.initial = np.full(k, 1.0 / k) if initial is None else np.asarray(initial, dtype=float)
        self.bound = bound

    def sample_initial(self, n, rng):
        return rng.generator.choice(len(self.initial), size=n, p=self.initial)[:, None].astype(float)

    def sample_transition(self, s, x, rng):
        rows = self.density[x[:, 0].astype(int)]
        rows = rows / rows.sum(axis=1, keepdims=True)
        u = rng.random(len(rows))[:, None]
        return (rows.cumsum(axis=1) <= u).sum(axis=1)[:, None].astype(float)

    def log_transition_density(self, s, x, x_next):
        i = np.asarray(x)[..., 0].astype(int)
        j = np.asarray(x_next)[..., 0].astype(int)
        with np.errstate(divide="ignore"):
            return np.log(self.density[i, j])

    def log_transition_density_upper(self, s):
        return float(np.log(self.density.max())) if self.bound else None

    def log_potential(self, s, x):
        with np.errstate(divide="ignore"):
            return np.log(self.pot[np.asarray(x)[..., 0].astype(int)])


def dense_prior(params, n_states):
    """Prior mean and covariance of the stacked states x_0..x_{n-1}.

    Uses x_s = A^s x_0 + sum_r A^{s-r} v_r directly, with no recursion.
    """
    dx, A = params.dx, params.A
    n = n_states
    lmap = np.zeros((n * dx, n * dx))
    for s in range(n):
        for r in range(s + 1):
            lmap[s * dx:(s + 1) * dx, r * dx:(r + 1) * dx] = np.linalg.matrix_power(A, s - r)
    wcov = np.kron(np.eye(n), params.state_cov)
    wcov[:dx, :dx] = params.P0
    mean_w = np.zeros(n * dx)
    mean_w[:dx] = params.m0
    return lmap @ mean_w, lmap @ wcov @ lmap.T


def dense_posterior(params, y, n_states):
    """Posterior mean ``(n, dx)`` and stacked covariance given y_0..y_{len(y)-1}."""
    dx, dy = params.dx, params.dy
    n_obs = len(y)
    mx, cx = dense_prior(params, n_states)
    H = np.zeros((n_obs * dy, n_states * dx))
    for s in range(n_obs):
        H[s * dy:(s + 1) * dy, s * dx:(s + 1) * dx] = params.B
    cy = H @ cx @ H.T + np.kron(np.eye(n_obs), params.obs_cov)
    gain = np.linalg.solve(cy, H @ cx).T
    post_mean = mx + gain @ (np.ravel(y) - H @ mx)
    return post_mean.reshape(n_states, dx), cx - gain @ H @ cx
