"""Finite-state HMM with exact forward-backward smoothing.

Used as the invariance oracle for the particle Gibbs kernels.  States are
stored as floats ``0.0 .. K-1`` in ``(..., 1)`` arrays so the model plugs
into the generic particle code; densities are w.r.t. counting measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import StateSpaceModel
from ..rng import as_stream


@dataclass(frozen=True)
class DiscreteHmm:
    transition: np.ndarray  # K x K, rows stochastic
    emissions: np.ndarray  # n_times x K potentials g_s(k)
    initial: np.ndarray  # K

    def __post_init__(self):
        P = np.atleast_2d(np.asarray(self.transition, dtype=float))
        E = np.atleast_2d(np.asarray(self.emissions, dtype=float))
        p0 = np.asarray(self.initial, dtype=float).ravel()
        k = P.shape[0]
        if P.shape != (k, k) or E.shape[1] != k or p0.shape != (k,):
            raise ValueError("inconsistent state counts")
        if np.any(P < 0) or not np.allclose(P.sum(axis=1), 1.0):
            raise ValueError("transition rows must be stochastic")
        if np.any(E < 0) or np.any(p0 < 0) or not np.isclose(p0.sum(), 1.0):
            raise ValueError("weights must be non-negative and initial law normalised")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "emissions", E)
        object.__setattr__(self, "initial", p0)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    def potentials(self, s):
        if s < self.emissions.shape[0]:
            return self.emissions[s]
        return np.ones(self.n_states)


class DiscreteHmmModel(StateSpaceModel):
    state_dim = 1

    def __init__(self, hmm: DiscreteHmm):
        self.hmm = hmm
        self._cum_init = np.cumsum(hmm.initial)
        self._cum_trans = np.cumsum(hmm.transition, axis=1)
        with np.errstate(divide="ignore"):
            self._log_trans = np.log(hmm.transition)
            self._log_emis = np.log(hmm.emissions)

    def _draw(self, cum, gen, size):
        u = gen.random(size) * cum[..., -1]
        return (cum <= u[..., None]).sum(axis=-1)

    def sample_initial(self, n, rng):
        k = self._draw(self._cum_init, rng.generator, n)
        return k[:, None].astype(float)

    def sample_transition(self, s, x, rng):
        rows = self._cum_trans[x[:, 0].astype(np.intp)]
        u = rng.generator.random(len(rows)) * rows[:, -1]
        k = (rows <= u[:, None]).sum(axis=1)
        return k[:, None].astype(float)

    def log_transition_density(self, s, x, x_next):
        i = np.asarray(x)[..., 0].astype(np.intp)
        j = np.asarray(x_next)[..., 0].astype(np.intp)
        return self._log_trans[i, j]

    def log_potential(self, s, x):
        k = np.asarray(x)[..., 0].astype(np.intp)
        if s >= self._log_emis.shape[0]:
            return np.zeros(k.shape)
        return self._log_emis[s][k]

    def log_transition_density_upper(self, s):
        return None


def discrete_model(hmm: DiscreteHmm) -> DiscreteHmmModel:
    return DiscreteHmmModel(hmm)


@dataclass
class DiscreteSmoothing:
    marginals: np.ndarray  # (T+1) x K
    pairwise: np.ndarray  # T x K x K, joint law of (x_s, x_{s+1})


def discrete_fb_smooth(hmm: DiscreteHmm, horizon) -> DiscreteSmoothing:
    """Exact marginals of the law ∝ p0(x_0) prod_{s<T} g_s(x_s) P(x_s, x_{s+1})."""
    k = hmm.n_states
    P = hmm.transition
    alpha = np.empty((horizon + 1, k))
    a = hmm.initial.copy()
    alpha[0] = a / a.sum()
    for s in range(horizon):
        a = (alpha[s] * hmm.potentials(s)) @ P
        alpha[s + 1] = a / a.sum()
    beta = np.ones((horizon + 1, k))
    for s in range(horizon - 1, -1, -1):
        b = hmm.potentials(s) * (P @ beta[s + 1])
        beta[s] = b / b.sum()
    marg = alpha * beta
    marg /= marg.sum(axis=1, keepdims=True)
    pair = np.empty((horizon, k, k))
    for s in range(horizon):
        j = (alpha[s] * hmm.potentials(s))[:, None] * P * beta[s + 1][None, :]
        pair[s] = j / j.sum()
    return DiscreteSmoothing(marg, pair)


def sample_smoothing_path(hmm: DiscreteHmm, horizon, rng) -> np.ndarray:
    """Exact draw from the joint smoothing law (forward filter, backward sample)."""
    gen = as_stream(rng).generator
    k = hmm.n_states
    filt = np.empty((horizon + 1, k))
    a = hmm.initial.copy()
    filt[0] = a / a.sum()
    for s in range(horizon):
        a = (filt[s] * hmm.potentials(s)) @ hmm.transition
        filt[s + 1] = a / a.sum()
    path = np.empty(horizon + 1, dtype=np.intp)
    path[horizon] = gen.choice(k, p=filt[horizon])
    for s in range(horizon - 1, -1, -1):
        w = filt[s] * hmm.potentials(s) * hmm.transition[:, path[s + 1]]
        path[s] = gen.choice(k, p=w / w.sum())
    return path[:, None].astype(float)
