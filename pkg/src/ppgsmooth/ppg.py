"""PaRIS particle Gibbs: conditional PaRIS sweeps chained through frozen paths.

One PPG iteration runs a conditional particle filter around the frozen path,
updates PaRIS statistics along the way and extends each particle's backward
path with its first backward index.  The next frozen path is one of those N
backward paths, chosen uniformly.  Averaging the statistics of iterations
``k0+1..k`` gives the roll-out estimator.

Backward paths are stored as one index vector per time step plus the clouds,
so memory is O(N T) and states are rebuilt on demand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .alias import build_alias
from .core import ParticleCloud, pf_init, run_filter, trace_lineage
from .errors import BelowParticleThresholdError, NonpositiveBoundError
from .rng import as_stream
from .smoothing import (
    EXACT,
    BackwardSamplerConfig,
    BackwardStats,
    backward_draws,
    paris_update,
)

CONDITIONAL_ANCESTOR = -1  # sentinel ancestor of the frozen particle


@dataclass(frozen=True)
class FrozenPath:
    states: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.states, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("a path needs shape (T+1, state_dim)")
        object.__setattr__(self, "states", x)

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    def __len__(self):
        return self.states.shape[0]

    def __getitem__(self, s):
        return self.states[s]


def _as_path(path) -> FrozenPath:
    return path if isinstance(path, FrozenPath) else FrozenPath(path)


def _conditional_slot(n, gen, fixed_slot):
    return 0 if fixed_slot else int(gen.integers(0, n))


def cpf_init(model, n, zeta0, rng, fixed_slot=False) -> ParticleCloud:
    """Initial CPF cloud: zeta0 at a uniform slot, the rest i.i.d. from eta0."""
    if n < 1:
        raise ValueError("need at least one particle")
    rng = as_stream(rng)
    slot = _conditional_slot(n, rng.generator, fixed_slot)
    x = model.sample_initial(n, rng) if n > 1 else np.empty((1, model.state_dim))
    x[slot] = np.asarray(zeta0, dtype=float).reshape(model.state_dim)
    return ParticleCloud.from_particles(model, 0, x)


def cpf_step(model, cloud: ParticleCloud, zeta_next, rng, fixed_slot=False, table=None):
    """One CPF step.

    Returns ``(ancestors, next_cloud)``; the slot holding ``zeta_next`` has
    ancestor :data:`CONDITIONAL_ANCESTOR`.
    """
    rng = as_stream(rng)
    n = cloud.n
    if table is None:
        table = build_alias(cloud.weights())
    slot = _conditional_slot(n, rng.generator, fixed_slot)
    ancestors = table.sample(rng, n)
    x_next = model.sample_transition(cloud.time_index, cloud.particles[ancestors], rng)
    x_next[slot] = np.asarray(zeta_next, dtype=float).reshape(model.state_dim)
    ancestors[slot] = CONDITIONAL_ANCESTOR
    return ancestors, ParticleCloud.from_particles(model, cloud.time_index + 1, x_next)


@dataclass
class PathSystem:
    """Clouds, PaRIS statistics and backward-path links up to time ``s``.

    ``links[s][i]`` is J^{i,1}_s, the time-s index on the backward path of
    particle i at time s+1.
    """

    clouds: list
    links: list
    stats: BackwardStats

    @property
    def time_index(self) -> int:
        return len(self.clouds) - 1

    def path_indices(self, i) -> np.ndarray:
        idx = np.empty(len(self.clouds), dtype=np.intp)
        idx[-1] = i
        for s in range(len(self.links) - 1, -1, -1):
            idx[s] = self.links[s][idx[s + 1]]
        return idx

    def path(self, i) -> FrozenPath:
        idx = self.path_indices(i)
        return FrozenPath(np.stack([c.particles[j] for c, j in zip(self.clouds, idx)]))

    def all_paths(self) -> np.ndarray:
        """Every backward path, shape ``(N, T+1, state_dim)``."""
        n = self.clouds[-1].n
        idx = np.arange(n)
        out = np.empty((n, len(self.clouds), self.clouds[0].particles.shape[1]))
        out[:, -1] = self.clouds[-1].particles[idx]
        for s in range(len(self.links) - 1, -1, -1):
            idx = self.links[s][idx]
            out[:, s] = self.clouds[s].particles[idx]
        return out


def _cond_paris_core(model, system, zeta_next, functional, m, cfg, rng, fixed_slot):
    prev = system.clouds[-1]
    table = build_alias(prev.weights())
    _, nxt = cpf_step(model, prev, zeta_next, rng, fixed_slot, table)
    idx = backward_draws(model, prev, nxt.particles, m, cfg, rng, table)
    stats = BackwardStats(
        paris_update(prev, system.stats, nxt, functional, idx), nxt.time_index
    )
    return nxt, idx[:, 0], stats


def cond_paris_update(
    model, system: PathSystem, zeta_next, functional, m, cfg, rng, fixed_slot=False
) -> PathSystem:
    """One conditional PaRIS update; returns the extended system."""
    if m < 1:
        raise ValueError("M must be at least 1")
    rng = as_stream(rng)
    nxt, link, stats = _cond_paris_core(model, system, zeta_next, functional, m, cfg, rng, fixed_slot)
    return PathSystem(system.clouds + [nxt], system.links + [link], stats)


def initial_system(model, n, zeta0, functional, rng, fixed_slot=False) -> PathSystem:
    cloud = cpf_init(model, n, zeta0, rng, fixed_slot)
    return PathSystem([cloud], [], BackwardStats.zeros(n, functional.dim))


def backward_initial_path(model, horizon, n, rng, cfg: BackwardSamplerConfig = EXACT) -> FrozenPath:
    """One backward path of an unconditional PaRIS pass with M = 1.

    A cheap approximate draw from the joint smoothing law, used to start
    PPG chains.
    """
    rng = as_stream(rng)
    cloud = pf_init(model, n, rng)
    clouds, links = [cloud], []
    for _ in range(horizon):
        table = build_alias(cloud.weights())
        ancestors = table.sample(rng, n)
        x_next = model.sample_transition(cloud.time_index, cloud.particles[ancestors], rng)
        nxt = ParticleCloud.from_particles(model, cloud.time_index + 1, x_next)
        links.append(backward_draws(model, cloud, nxt.particles, 1, cfg, rng, table)[:, 0])
        clouds.append(nxt)
        cloud = nxt
    system = PathSystem(clouds, links, None)
    return system.path(int(rng.generator.integers(0, n)))


def lineage_initial_path(model, horizon, n, rng) -> FrozenPath:
    """The genealogy of a uniformly chosen particle of a bootstrap filter run."""
    rng = as_stream(rng)
    clouds, ancestors = run_filter(model, horizon, n, rng)
    idx = trace_lineage(ancestors, int(rng.generator.integers(0, n)))
    return FrozenPath(np.stack([c.particles[j] for c, j in zip(clouds, idx)]))


@dataclass
class PpgIterate:
    stats: BackwardStats
    paths: PathSystem
    new_path: FrozenPath
    new_index: int

    @property
    def estimate(self) -> np.ndarray:
        return self.stats.mean()


def ppg_iteration(
    model, path, n, m, functional, cfg: BackwardSamplerConfig, rng, fixed_slot=False
) -> PpgIterate:
    path = _as_path(path)
    if path.horizon < 1:
        raise ValueError("the frozen path must span at least two time steps")
    rng = as_stream(rng)
    system = initial_system(model, n, path[0], functional, rng, fixed_slot)
    # lists are extended in place here; cond_paris_update copies them
    clouds, links, stats = system.clouds, system.links, system.stats
    for s in range(path.horizon):
        nxt, link, stats = _cond_paris_core(
            model, PathSystem(clouds, links, stats), path[s + 1], functional, m, cfg, rng, fixed_slot
        )
        clouds.append(nxt)
        links.append(link)
    system = PathSystem(clouds, links, stats)
    j = int(rng.generator.integers(0, n))
    return PpgIterate(stats, system, system.path(j), j)


@dataclass(frozen=True)
class RolloutConfig:
    n: int
    m: int = 2
    k: int = 2
    k0: int = None

    def __post_init__(self):
        k0 = self.k // 2 if self.k0 is None else self.k0
        object.__setattr__(self, "k0", k0)
        if min(self.n, self.m, self.k) < 1 or k0 < 0 or k0 >= self.k:
            raise ValueError("need N, M, k >= 1 and 0 <= k0 < k")

    @property
    def budget(self) -> int:
        return self.n * self.k

    @property
    def retained_fraction(self) -> float:
        return (self.k - self.k0) / self.k


def rollout_estimate(per_iteration, k0) -> np.ndarray:
    """Mean of the per-iteration estimates of iterations ``k0+1..k``."""
    est = np.asarray(per_iteration, dtype=float)
    return est[k0:].mean(axis=0)


def ppg_run(model, init_path, cfg: RolloutConfig, functional, sampler_cfg, rng, fixed_slot=False):
    """Chain ``k`` PPG iterations.

    Returns ``(rollout, per_iteration_estimates, final_path)``.
    """
    sampler_cfg.validate_for(model)
    rng = as_stream(rng)
    path = _as_path(init_path)
    per_iter = np.empty((cfg.k, functional.dim))
    for ell in range(cfg.k):
        it = ppg_iteration(model, path, cfg.n, cfg.m, functional, sampler_cfg, rng, fixed_slot)
        per_iter[ell] = it.estimate
        path = it.new_path
    return rollout_estimate(per_iter, cfg.k0), per_iter, path


def pgas_iteration(model, path, n, rng, fixed_slot=False) -> FrozenPath:
    """Particle Gibbs with ancestor sampling around ``path``.

    The frozen particle's ancestor is drawn proportionally to
    g_s(xi_s^l) m_s(xi_s^l, zeta_{s+1}); the output is the genealogy of a
    uniformly chosen final particle.
    """
    path = _as_path(path)
    rng = as_stream(rng)
    gen = rng.generator
    cloud = cpf_init(model, n, path[0], rng, fixed_slot)
    clouds = [cloud]
    ancestors = []
    for s in range(path.horizon):
        zeta = path[s + 1]
        a, nxt = cpf_step(model, cloud, zeta, rng, fixed_slot)
        slot = int(np.flatnonzero(a == CONDITIONAL_ANCESTOR)[0])
        logw = cloud.log_potentials + model.log_transition_density(
            s, cloud.particles, zeta[None, :]
        )
        w = np.exp(logw - logw.max())
        a[slot] = int(np.searchsorted(np.cumsum(w), gen.random() * w.sum(), side="right"))
        a[slot] = min(a[slot], n - 1)
        ancestors.append(a)
        clouds.append(nxt)
        cloud = nxt
    i = int(gen.integers(0, n))
    states = np.empty_like(path.states)
    for s in range(path.horizon, -1, -1):
        states[s] = clouds[s].particles[i]
        if s:
            i = ancestors[s - 1][i]
    return FrozenPath(states)


@dataclass(frozen=True)
class MixingDiagnostics:
    rho_t: float
    kappa: float
    n_min: int
    below_threshold: bool


def rho_bound(g_bounds, m_bounds, t) -> float:
    """max over s <= t of (g_max m_max) / (g_min m_min).

    ``g_bounds`` and ``m_bounds`` are sequences of ``(min, max)`` pairs, or a
    single pair used at every time.
    """
    g = np.asarray(g_bounds, dtype=float).reshape(-1, 2)
    mb = np.asarray(m_bounds, dtype=float).reshape(-1, 2)
    if np.any(g <= 0) or np.any(mb <= 0):
        raise NonpositiveBoundError("all bounds must be positive")
    if np.any(g[:, 0] > g[:, 1]) or np.any(mb[:, 0] > mb[:, 1]):
        raise NonpositiveBoundError("each lower bound must not exceed its upper bound")
    times = np.arange(t + 1)
    gi = g[np.minimum(times, len(g) - 1)]
    mi = mb[np.minimum(times, len(mb) - 1)]
    return float(np.max(gi[:, 1] * mi[:, 1] / (gi[:, 0] * mi[:, 0])))


def particle_threshold(rho, t) -> float:
    """N_t = (1 + 5 rho^2 / 2) v 2 t (1 + rho^2)."""
    return max(1.0 + 2.5 * rho * rho, 2.0 * t * (1.0 + rho * rho))


def kappa_rate(rho, n, t, strict=True):
    """Strong-mixing contraction rate kappa_{N,t} and the threshold n_min.

    ``n_min`` is the largest integer not exceeding N_t, so N > N_t iff
    N > n_min.  With ``strict`` a particle count at or below the threshold
    raises :class:`BelowParticleThresholdError`.
    """
    if rho < 1 or n < 1 or t < 1:
        raise ValueError("need rho >= 1, N >= 1 and t >= 1")
    n_t = particle_threshold(rho, t)
    n_min = int(math.floor(n_t))
    if strict and n <= n_t:
        raise BelowParticleThresholdError(n_min)
    r2 = rho * rho
    kappa = 1.0 - (1.0 - (1.0 + 2.5 * t * r2) / n) / (1.0 + 4.0 * t * (1.0 + 2.0 * r2) / n)
    return kappa, n_min


def mixing_diagnostics(rho, n, t) -> MixingDiagnostics:
    kappa, n_min = kappa_rate(rho, n, t, strict=False)
    return MixingDiagnostics(rho, kappa, n_min, n <= particle_threshold(rho, t))
