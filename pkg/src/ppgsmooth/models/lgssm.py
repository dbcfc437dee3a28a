"""Linear Gaussian state-space model and its exact oracles.

    X_{m+1} = A X_m + Q eps_{m+1},   Y_m = B X_m + R zeta_m,   X_0 ~ N(m0, P0)

``Q`` and ``R`` are noise loadings, so the covariances are ``Q Q^T`` and
``R R^T``.  The smoother is Rauch-Tung-Striebel with the lag-one
cross-covariance recursion, which yields the same smoothed sufficient
statistics as the disturbance smoother.

Observation arrays have one row per time step.  Oracles accept
``n_states >= len(observations)``; states past the last observation are
unobserved, matching the Feynman-Kac target used by the particle smoothers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..core import StateSpaceModel
from ..errors import SingularCovarianceError, SingularInnovationError
from ..rng import as_stream

LOG_2PI = math.log(2.0 * math.pi)


def _mat(a, rows=None):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if rows is not None and a.shape[0] != rows:
        a = a.reshape(rows, -1)
    return a


def _sym(p):
    return 0.5 * (p + p.T)


@dataclass(frozen=True)
class LgssmParams:
    A: np.ndarray
    Q: np.ndarray
    B: np.ndarray
    R: np.ndarray
    m0: np.ndarray = None
    P0: np.ndarray = None

    def __post_init__(self):
        A = _mat(self.A)
        dx = A.shape[0]
        Q = _mat(self.Q, dx)
        B = _mat(self.B)
        if B.shape[1] != dx:
            B = B.reshape(-1, dx)
        R = _mat(self.R, B.shape[0])
        m0 = np.zeros(dx) if self.m0 is None else np.asarray(self.m0, dtype=float).reshape(dx)
        P0 = np.eye(dx) if self.P0 is None else _mat(self.P0, dx)
        if A.shape != (dx, dx) or P0.shape != (dx, dx):
            raise ValueError("A and P0 must be square with the state dimension")
        for name, val in dict(A=A, Q=Q, B=B, R=R, m0=m0, P0=P0).items():
            object.__setattr__(self, name, val)

    @classmethod
    def scalar(cls, a, q, b, r, m0=0.0, p0=1.0):
        return cls([[a]], [[q]], [[b]], [[r]], [m0], [[p0]])

    @property
    def dx(self) -> int:
        return self.A.shape[0]

    @property
    def dy(self) -> int:
        return self.B.shape[0]

    @property
    def state_cov(self):
        return self.Q @ self.Q.T

    @property
    def obs_cov(self):
        return self.R @ self.R.T

    def with_theta(self, theta):
        """Replace (A, B) by the flat vector ``[vec(A), vec(B)]`` (row-major)."""
        theta = np.asarray(theta, dtype=float)
        na = self.dx * self.dx
        return replace(
            self, A=theta[:na].reshape(self.dx, self.dx), B=theta[na:].reshape(self.dy, self.dx)
        )

    def theta(self) -> np.ndarray:
        return np.concatenate([self.A.ravel(), self.B.ravel()])


def lgssm_simulate(params: LgssmParams, horizon, rng):
    """Simulate states and observations at times ``0..horizon``."""
    rng = as_stream(rng)
    gen = rng.generator
    n = horizon + 1
    L0 = np.linalg.cholesky(params.P0) if np.any(params.P0) else np.zeros_like(params.P0)
    x = np.empty((n, params.dx))
    x[0] = params.m0 + L0 @ gen.standard_normal(params.dx)
    for m in range(1, n):
        x[m] = params.A @ x[m - 1] + params.Q @ gen.standard_normal(params.Q.shape[1])
    y = x @ params.B.T + gen.standard_normal((n, params.R.shape[1])) @ params.R.T
    return x, y


def _gauss_logpdf_factor(cov):
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise SingularCovarianceError("covariance is not positive definite") from exc
    inv_chol = np.linalg.inv(chol)
    log_norm = -0.5 * cov.shape[0] * LOG_2PI - np.log(np.diag(chol)).sum()
    return inv_chol, log_norm


class LgssmModel(StateSpaceModel):
    """Bootstrap Feynman-Kac model of an LGSSM given an observation record."""

    def __init__(self, params: LgssmParams, observations):
        self.params = params
        self.state_dim = params.dx
        y = np.asarray(observations, dtype=float)
        self.observations = y.reshape(len(y), params.dy)
        self._trans_inv, self._trans_norm = _gauss_logpdf_factor(params.state_cov)
        self._obs_inv, self._obs_norm = _gauss_logpdf_factor(params.obs_cov)
        self._init_chol = np.linalg.cholesky(params.P0) if np.any(params.P0) else 0 * params.P0
        self._At = params.A.T
        self._Bt = params.B.T
        self._Qt = params.Q.T

    def sample_initial(self, n, rng):
        z = rng.normal((n, self.state_dim))
        return self.params.m0 + z @ self._init_chol.T

    def sample_transition(self, s, x, rng):
        z = rng.normal((x.shape[0], self._Qt.shape[0]))
        return x @ self._At + z @ self._Qt

    def log_transition_density(self, s, x, x_next):
        if self.state_dim == 1:
            z = (x_next - x * self._At[0, 0]) * self._trans_inv[0, 0]
            return self._trans_norm - 0.5 * z[..., 0] ** 2
        z = (x_next - x @ self._At) @ self._trans_inv.T
        return self._trans_norm - 0.5 * np.sum(z * z, axis=-1)

    def log_transition_density_upper(self, s):
        return self._trans_norm

    def log_potential(self, s, x):
        if s >= len(self.observations):
            return np.zeros(np.shape(x)[:-1])
        z = (self.observations[s] - x @ self._Bt) @ self._obs_inv.T
        return self._obs_norm - 0.5 * np.sum(z * z, axis=-1)


def lgssm_model(params: LgssmParams, observations) -> LgssmModel:
    return LgssmModel(params, observations)


@dataclass
class FilterResult:
    pred_means: np.ndarray
    pred_covs: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    loglik: float


def kalman_filter(params: LgssmParams, observations, n_states=None) -> FilterResult:
    """Exact filtering moments and log p(y_0, ..., y_{n_obs-1})."""
    y = np.asarray(observations, dtype=float).reshape(-1, params.dy)
    n_obs = y.shape[0]
    n = n_obs if n_states is None else int(n_states)
    if n < n_obs:
        raise ValueError("n_states must cover every observation")
    A, B = params.A, params.B
    Sq, Sr = params.state_cov, params.obs_cov
    dx = params.dx
    pm = np.empty((n, dx))
    pP = np.empty((n, dx, dx))
    fm = np.empty((n, dx))
    fP = np.empty((n, dx, dx))
    m, P = params.m0.copy(), params.P0.copy()
    loglik = 0.0
    for s in range(n):
        if s > 0:
            m = A @ fm[s - 1]
            P = _sym(A @ fP[s - 1] @ A.T + Sq)
        pm[s], pP[s] = m, P
        if s < n_obs:
            S = _sym(B @ P @ B.T + Sr)
            try:
                cS = np.linalg.cholesky(S)
            except np.linalg.LinAlgError as exc:
                raise SingularInnovationError(f"innovation covariance singular at {s}") from exc
            resid = y[s] - B @ m
            w = np.linalg.solve(cS, resid)
            loglik += -0.5 * (len(resid) * LOG_2PI + w @ w) - np.log(np.diag(cS)).sum()
            K = np.linalg.solve(S, B @ P).T
            m = m + K @ resid
            P = _sym(P - K @ S @ K.T)
        fm[s], fP[s] = m, P
    return FilterResult(pm, pP, fm, fP, float(loglik))


@dataclass
class SmoothedMoments:
    means: np.ndarray
    covs: np.ndarray
    lag_one_covs: np.ndarray  # Cov(x_s, x_{s+1} | y), s = 0..n-2
    loglik: float
    observations: np.ndarray = field(repr=False, default=None)

    @property
    def n_states(self) -> int:
        return self.means.shape[0]

    def second_moments(self):
        """E[x_s x_s^T | y] for every s."""
        return self.covs + np.einsum("si,sj->sij", self.means, self.means)

    def lag_one_second_moments(self):
        """E[x_s x_{s+1}^T | y] for s = 0..n-2."""
        return self.lag_one_covs + np.einsum("si,sj->sij", self.means[:-1], self.means[1:])

    def lag_one_sum(self) -> np.ndarray:
        """Smoothed expectation of sum_s x_s x_{s+1}^T."""
        return self.lag_one_second_moments().sum(axis=0)


def disturbance_smooth(params: LgssmParams, observations, n_states=None) -> SmoothedMoments:
    filt = kalman_filter(params, observations, n_states)
    n, dx = filt.means.shape
    A = params.A
    sm = filt.means.copy()
    sP = filt.covs.copy()
    lag = np.zeros((max(n - 1, 0), dx, dx))
    for s in range(n - 2, -1, -1):
        Pp = filt.pred_covs[s + 1]
        G = np.linalg.solve(Pp, A @ filt.covs[s]).T
        sm[s] = filt.means[s] + G @ (sm[s + 1] - filt.pred_means[s + 1])
        sP[s] = _sym(filt.covs[s] + G @ (sP[s + 1] - Pp) @ G.T)
        lag[s] = G @ sP[s + 1]
    y = np.asarray(observations, dtype=float).reshape(-1, params.dy)
    return SmoothedMoments(sm, sP, lag, filt.loglik, y)


def lag_one_reference(params: LgssmParams, observations, horizon) -> np.ndarray:
    """Exact E[sum_{m<T} x_m x_{m+1}^T | y_{0:T-1}], flattened row-major."""
    y = np.asarray(observations, dtype=float).reshape(-1, params.dy)[:horizon]
    return disturbance_smooth(params, y, horizon + 1).lag_one_sum().ravel()


def _sufficient_stats(sm: SmoothedMoments):
    n_obs = sm.observations.shape[0]
    xx = sm.second_moments()
    s00 = xx[: n_obs - 1].sum(axis=0)
    s10 = sm.lag_one_second_moments()[: n_obs - 1].sum(axis=0).T
    sxx = xx[:n_obs].sum(axis=0)
    syx = sm.observations.T @ sm.means[:n_obs]
    return s00, s10, sxx, syx


def lgssm_exact_score(params: LgssmParams, observations) -> np.ndarray:
    """Gradient of log p(y_{0:n-1}) in ``[vec(A), vec(B)]`` with Q, R fixed."""
    sm = disturbance_smooth(params, observations)
    s00, s10, sxx, syx = _sufficient_stats(sm)
    gA = np.linalg.solve(params.state_cov, s10 - params.A @ s00)
    gB = np.linalg.solve(params.obs_cov, syx - params.B @ sxx)
    return np.concatenate([gA.ravel(), gB.ravel()])


def lgssm_loglik(params: LgssmParams, observations) -> float:
    return kalman_filter(params, observations).loglik


def em_step(params: LgssmParams, observations) -> LgssmParams:
    """One exact EM update of (A, B); Q, R, m0, P0 stay fixed."""
    sm = disturbance_smooth(params, observations)
    s00, s10, sxx, syx = _sufficient_stats(sm)
    A = np.linalg.solve(s00.T, s10.T).T
    B = np.linalg.solve(sxx.T, syx.T).T
    return replace(params, A=A, B=B)


def lgssm_exact_mle(params0: LgssmParams, observations, iters=1000, tol=0.0):
    """Run up to ``iters`` EM steps; stop early once the update is below ``tol``.

    Returns ``(params, logliks)`` with the log-likelihood before each step
    and after the last one.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    params = params0
    logliks = [lgssm_loglik(params, observations)]
    for _ in range(iters):
        new = em_step(params, observations)
        move = np.max(np.abs(new.theta() - params.theta()))
        params = new
        logliks.append(lgssm_loglik(params, observations))
        if move < tol:
            break
    return params, np.asarray(logliks)


def singular_value_distance(theta_a: LgssmParams, theta_b: LgssmParams) -> float:
    """L2 distance between the sorted singular values of (A, B) of two fits."""

    def sv(p):
        return np.concatenate(
            [np.linalg.svd(p.A, compute_uv=False), np.linalg.svd(p.B, compute_uv=False)]
        )

    return float(np.linalg.norm(sv(theta_a) - sv(theta_b)))


def benchmark_scalar_params() -> LgssmParams:
    """The scalar configuration A=0.97, Q=0.60, B=0.54, R=0.33, X_0 ~ N(0, 1)."""
    return LgssmParams.scalar(0.97, 0.60, 0.54, 0.33)
