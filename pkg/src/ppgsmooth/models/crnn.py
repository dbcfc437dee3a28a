"""Chaotic recurrent neural network state-space model.

    X_{m+1} = X_m + c (-X_m + gamma W tanh(X_m)) + eps_{m+1},  eps ~ N(0, 0.01 I)
    Y_m     = B X_m + zeta_m,  zeta_m,k ~ Student-t(df=2, scale=0.1)

with ``c = Delta / tau``.  Defaults for ``c``, ``gamma``, ``W`` and ``B``
are assumed values (W, B entries i.i.d. N(0, 1/dim), c = 0.03,
gamma = 2.5); override them for other settings.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln

from ..core import StateSpaceModel
from ..rng import as_stream

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class CrnnParams:
    W: np.ndarray
    B: np.ndarray
    tau: float = 1.0
    delta: float = 0.03
    gamma: float = 2.5
    state_var: float = 0.01
    obs_scale: float = 0.1
    obs_df: float = 2.0
    init_scale: float = 1.0

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if W.shape[0] != W.shape[1] or B.shape[1] != W.shape[0]:
            raise ValueError("W must be square and B must have dim columns")
        if self.tau <= 0 or self.state_var <= 0 or self.obs_scale <= 0 or self.obs_df <= 0:
            raise ValueError("tau, noise scales and df must be positive")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "B", B)

    @classmethod
    def default(cls, rng, dim=20, dy=20, **kw):
        gen = as_stream(rng).generator
        sd = 1.0 / math.sqrt(dim)
        return cls(W=gen.normal(0.0, sd, (dim, dim)), B=gen.normal(0.0, sd, (dy, dim)), **kw)

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def dy(self) -> int:
        return self.B.shape[0]

    @property
    def rate(self) -> float:
        return self.delta / self.tau

    def theta(self):
        return np.concatenate([self.W.ravel(), self.B.ravel()])

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        nw = self.dim * self.dim
        return replace(self, W=theta[:nw].reshape(self.W.shape), B=theta[nw:].reshape(self.B.shape))

    def drift(self, x):
        return x + self.rate * (-x + self.gamma * np.tanh(x) @ self.W.T)


def student_t_logpdf(r, df, scale):
    """Elementwise log density of a scaled Student-t at ``r``."""
    z = np.asarray(r) / scale
    return (
        gammaln(0.5 * (df + 1))
        - gammaln(0.5 * df)
        - 0.5 * math.log(df * math.pi)
        - math.log(scale)
        - 0.5 * (df + 1) * np.log1p(z * z / df)
    )


def crnn_simulate(params: CrnnParams, horizon, rng, noise=True):
    """States and observations at times ``0..horizon``.

    With ``noise=False`` every noise draw is zero, giving the deterministic
    orbit of the drift map started at the origin.
    """
    gen = as_stream(rng).generator
    n = horizon + 1
    d = params.dim
    x = np.empty((n, d))
    x[0] = params.init_scale * gen.standard_normal(d) if noise else np.zeros(d)
    for m in range(1, n):
        x[m] = params.drift(x[m - 1])
        if noise:
            x[m] += math.sqrt(params.state_var) * gen.standard_normal(d)
    y = x @ params.B.T
    if noise:
        y = y + params.obs_scale * gen.standard_t(params.obs_df, (n, params.dy))
    return x, y


class CrnnModel(StateSpaceModel):
    def __init__(self, params: CrnnParams, observations):
        self.params = params
        self.state_dim = params.dim
        self.observations = np.asarray(observations, dtype=float).reshape(-1, params.dy)
        self._sd = math.sqrt(params.state_var)
        self._log_norm = -0.5 * params.dim * (LOG_2PI + math.log(params.state_var))

    def sample_initial(self, n, rng):
        return self.params.init_scale * rng.normal((n, self.state_dim))

    def sample_transition(self, s, x, rng):
        return self.params.drift(x) + self._sd * rng.normal(x.shape)

    def log_transition_density(self, s, x, x_next):
        r = x_next - self.params.drift(x)
        return self._log_norm - 0.5 * np.sum(r * r, axis=-1) / self.params.state_var

    def log_transition_density_upper(self, s):
        return self._log_norm

    def log_potential(self, s, x):
        if s >= len(self.observations):
            return np.zeros(np.shape(x)[:-1])
        r = self.observations[s] - x @ self.params.B.T
        return student_t_logpdf(r, self.params.obs_df, self.params.obs_scale).sum(axis=-1)


def crnn_model(params: CrnnParams, observations) -> CrnnModel:
    return CrnnModel(params, observations)
