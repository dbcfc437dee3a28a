"""Feynman-Kac model interface, particle clouds and the bootstrap filter.

Models are vectorised: states are arrays of shape ``(..., state_dim)`` and
every density method broadcasts over the leading axes.  Densities are
handled in the log domain; transition densities are taken with respect to
Lebesgue measure for continuous models and counting measure for discrete
ones.

For a horizon ``T`` the target is the joint law proportional to
``eta0(x0) * prod_{s<T} g_s(x_s) m_s(x_s, x_{s+1})``; the potential at the
final time is never used for smoothing.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .alias import build_alias
from .errors import AllWeightsZeroError
from .rng import as_stream


class StateSpaceModel(ABC):
    """Abstract (eta0, M_s, g_s) triple.

    Subclasses implement the log-domain methods; the linear-domain ones are
    derived.
    """

    state_dim: int

    @abstractmethod
    def sample_initial(self, n, rng) -> np.ndarray:
        """Draw ``n`` states from eta0, shape ``(n, state_dim)``."""

    @abstractmethod
    def sample_transition(self, s, x, rng) -> np.ndarray:
        """Draw one successor per row of ``x`` from M_s."""

    @abstractmethod
    def log_transition_density(self, s, x, x_next) -> np.ndarray:
        """log m_s(x, x_next), broadcasting over leading axes."""

    @abstractmethod
    def log_potential(self, s, x) -> np.ndarray:
        """log g_s(x), broadcasting over leading axes."""

    def log_transition_density_upper(self, s):
        """log of a uniform bound on m_s, or None if unavailable."""
        return None

    def transition_density(self, s, x, x_next):
        return np.exp(self.log_transition_density(s, x, x_next))

    def potential(self, s, x):
        return np.exp(self.log_potential(s, x))

    def transition_density_upper(self, s):
        lu = self.log_transition_density_upper(s)
        return None if lu is None else math.exp(lu)


@dataclass(frozen=True)
class ParticleCloud:
    """One generation of particles with their cached log-potentials."""

    time_index: int
    particles: np.ndarray
    log_potentials: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.particles, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        lp = np.asarray(self.log_potentials, dtype=float).reshape(-1)
        if x.shape[0] < 1 or x.shape[0] != lp.shape[0]:
            raise ValueError("particles and potentials must have matching length >= 1")
        if not np.any(lp > -np.inf):
            raise AllWeightsZeroError(f"all potentials vanish at time {self.time_index}")
        object.__setattr__(self, "particles", x)
        object.__setattr__(self, "log_potentials", lp)

    @classmethod
    def from_particles(cls, model, s, particles):
        x = np.asarray(particles, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        return cls(s, x, model.log_potential(s, x))

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def potentials(self) -> np.ndarray:
        return np.exp(self.log_potentials)

    def weights(self) -> np.ndarray:
        """Normalised selection weights."""
        w = np.exp(self.log_potentials - self.log_potentials.max())
        return w / w.sum()

    def log_mean_potential(self) -> float:
        m = self.log_potentials.max()
        return float(m + np.log(np.mean(np.exp(self.log_potentials - m))))


def pf_init(model, n, rng) -> ParticleCloud:
    if n < 1:
        raise ValueError("need at least one particle")
    rng = as_stream(rng)
    return ParticleCloud.from_particles(model, 0, model.sample_initial(n, rng))


def resample(cloud: ParticleCloud, n, rng) -> np.ndarray:
    """Multinomial ancestor draws proportional to the cloud potentials."""
    return build_alias(cloud.weights()).sample(rng, n)


def pf_step(model, cloud: ParticleCloud, rng):
    """One selection-mutation step; returns ``(ancestors, next_cloud)``."""
    rng = as_stream(rng)
    ancestors = resample(cloud, cloud.n, rng)
    x_next = model.sample_transition(cloud.time_index, cloud.particles[ancestors], rng)
    return ancestors, ParticleCloud.from_particles(model, cloud.time_index + 1, x_next)


def genealogy_update(prev_stats, ancestors, functional, prev_cloud, next_cloud):
    """Poor man's smoother: carry each statistic along its ancestor line."""
    b = np.asarray(prev_stats, dtype=float)
    a = np.asarray(ancestors)
    if b.shape[0] != prev_cloud.n or a.shape[0] != next_cloud.n or b.shape[1] != functional.dim:
        raise ValueError("dimension mismatch between statistics, ancestors and clouds")
    term = functional.term(prev_cloud.time_index, prev_cloud.particles[a], next_cloud.particles)
    return b[a] + term


def pf_loglik(model, horizon, n, rng) -> float:
    """Log of the unbiased particle estimate of the likelihood of y_{0:T}.

    Returns ``-inf`` when every particle weight vanishes.
    """
    rng = as_stream(rng)
    try:
        cloud = pf_init(model, n, rng)
        total = cloud.log_mean_potential()
        for _ in range(horizon):
            _, cloud = pf_step(model, cloud, rng)
            total += cloud.log_mean_potential()
    except AllWeightsZeroError:
        return -math.inf
    return total


def run_filter(model, horizon, n, rng):
    """Run the bootstrap filter, keeping every cloud and ancestor vector."""
    rng = as_stream(rng)
    clouds = [pf_init(model, n, rng)]
    ancestors = []
    for _ in range(horizon):
        a, nxt = pf_step(model, clouds[-1], rng)
        ancestors.append(a)
        clouds.append(nxt)
    return clouds, ancestors


def trace_lineage(ancestors, final_index):
    """Indices ``i_0..i_T`` of the ancestral line ending at ``final_index``."""
    idx = [int(final_index)]
    for a in reversed(ancestors):
        idx.append(int(a[idx[-1]]))
    return idx[::-1]


def distinct_initial_ancestors(ancestors) -> int:
    """Number of distinct time-0 ancestors of the final generation."""
    if not ancestors:
        raise ValueError("need at least one resampling step")
    lineage = np.arange(len(ancestors[-1]))
    for a in reversed(ancestors):
        lineage = a[lineage]
    return int(np.unique(lineage).size)
