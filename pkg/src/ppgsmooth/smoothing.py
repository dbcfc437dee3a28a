"""Backward kernel, forward-only FFBSm and the PaRIS estimator.

The backward kernel of the bootstrap filter is

    Lambda_s(i, j)  ∝  g_s(xi_s^j) m_s(xi_s^j, xi_{s+1}^i).

FFBSm averages statistics under the full row; PaRIS replaces the average by
``M`` draws from it, obtained either exactly, by accept-reject against the
potential-weighted proposal, or by the hybrid scheme (accept-reject for at
most ``max_trials`` proposals, then an exact draw).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .alias import build_alias
from .core import ParticleCloud, pf_init, pf_step
from .errors import MissingDensityUpperBoundError, ZeroBackwardMassError
from .rng import as_stream

# hard stop for pure accept-reject; a row this unlucky almost surely has no mass
_AR_ROUND_LIMIT = 1_000_000
# the hybrid sampler hands the last pending pairs to the exact sampler once
# fewer than this fraction remain; the fallback is exact, so the law is unchanged
_HYBRID_TAIL_FRACTION = 1 / 16


@dataclass(frozen=True)
class AdditiveFunctional:
    """h_t(x_{0:t}) = sum_s term(s, x_s, x_{s+1}) with ``dim``-vector terms.

    ``term`` must broadcast over leading axes of its state arguments and
    return an array of shape ``(..., dim)``.
    """

    dim: int
    term: Callable
    sup_bound: Optional[Callable] = None
    name: str = "functional"

    def along_path(self, states) -> np.ndarray:
        """Evaluate h_T on a single path of shape ``(T+1, state_dim)``."""
        x = np.asarray(states, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        total = np.zeros(self.dim)
        for s in range(x.shape[0] - 1):
            total += self.term(s, x[s], x[s + 1])
        return total


def zero_functional(dim=1) -> AdditiveFunctional:
    def term(s, x, x_next):
        shape = np.broadcast_shapes(np.shape(x)[:-1], np.shape(x_next)[:-1])
        return np.zeros(shape + (dim,))

    return AdditiveFunctional(dim, term, lambda s: 0.0, name="zero")


def lag_one_product(state_dim=1) -> AdditiveFunctional:
    """Sum of x_s x_{s+1}^T, flattened row-major (a scalar for 1-d states)."""

    def term(s, x, x_next):
        x, x_next = np.asarray(x), np.asarray(x_next)
        if state_dim == 1:
            return x * x_next
        prod = x[..., :, None] * x_next[..., None, :]
        return prod.reshape(prod.shape[:-2] + (state_dim * state_dim,))

    return AdditiveFunctional(state_dim * state_dim, term, name="lag_one")


@dataclass(frozen=True)
class BackwardStats:
    """PaRIS/FFBSm statistics b_s^{1:N}, an ``(N, d)`` matrix at time ``s``."""

    values: np.ndarray
    time_index: int = 0

    @classmethod
    def zeros(cls, n, dim):
        return cls(np.zeros((n, dim)), 0)

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)


class SamplerKind(str, enum.Enum):
    EXACT = "exact"
    ACCEPT_REJECT = "accept_reject"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class BackwardSamplerConfig:
    """How backward indices are drawn.

    ``max_trials`` is the hybrid cutoff; ``None`` means one trial per
    particle in the previous cloud.
    """

    kind: SamplerKind = SamplerKind.HYBRID
    max_trials: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", SamplerKind(self.kind))
        if self.max_trials is not None and self.max_trials < 1:
            raise ValueError("max_trials must be positive")

    def validate_for(self, model):
        if self.kind is not SamplerKind.EXACT:
            if model.log_transition_density_upper(0) is None:
                raise MissingDensityUpperBoundError(
                    f"{self.kind.value} backward sampling needs a transition density bound"
                )


EXACT = BackwardSamplerConfig(SamplerKind.EXACT)


def _as_rows(x_next, state_dim):
    x = np.asarray(x_next, dtype=float)
    if x.ndim < 2:
        x = x.reshape(1, state_dim)
    return x


def backward_log_weights(model, prev_cloud: ParticleCloud, x_next) -> np.ndarray:
    """Unnormalised log Lambda rows, shape ``(n_next, N_prev)``."""
    s = prev_cloud.time_index
    logm = model.log_transition_density(s, prev_cloud.particles[None, :, :], x_next[:, None, :])
    return prev_cloud.log_potentials[None, :] + logm


def _normalise_rows(logw):
    top = logw.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise ZeroBackwardMassError("backward kernel row has zero mass")
    w = np.exp(logw - top)
    return w / w.sum(axis=1, keepdims=True)


def backward_row_probs(model, prev_cloud: ParticleCloud, x_next) -> np.ndarray:
    """Lambda row(s) for one successor state (1-d output) or a batch (2-d)."""
    x = np.asarray(x_next, dtype=float)
    single = x.ndim <= 1
    rows = _normalise_rows(backward_log_weights(model, prev_cloud, _as_rows(x, model.state_dim)))
    return rows[0] if single else rows


def _categorical_rows(probs, m, gen):
    """``m`` independent draws per row of a row-stochastic matrix."""
    cum = np.cumsum(probs, axis=1)
    u = gen.random((probs.shape[0], m)) * cum[:, -1:]
    idx = (cum[:, None, :] <= u[:, :, None]).sum(axis=2)
    return np.minimum(idx, probs.shape[1] - 1)


def _exact_draws(model, prev_cloud, x_next, m, gen):
    probs = _normalise_rows(backward_log_weights(model, prev_cloud, x_next))
    return _categorical_rows(probs, m, gen)


def _accept_reject_draws(model, prev_cloud, x_next, m, gen, rng, max_trials, table):
    s = prev_cloud.time_index
    log_bound = model.log_transition_density_upper(s)
    if log_bound is None:
        raise MissingDensityUpperBoundError("accept-reject needs a transition density bound")
    if table is None:
        table = build_alias(prev_cloud.weights())
    n_next = x_next.shape[0]
    out = np.empty(n_next * m, dtype=np.intp)
    pending = np.arange(n_next * m)
    target = np.repeat(np.arange(n_next), m)
    rounds = 0
    limit = _AR_ROUND_LIMIT if max_trials is None else max_trials
    tail = 0 if max_trials is None else int(pending.size * _HYBRID_TAIL_FRACTION)
    while pending.size > tail and rounds < limit:
        cand = table.sample(rng, pending.size)
        logm = model.log_transition_density(
            s, prev_cloud.particles[cand], x_next[target[pending]]
        )
        accept = np.log(gen.random(pending.size)) < logm - log_bound
        out[pending[accept]] = cand[accept]
        pending = pending[~accept]
        rounds += 1
    if pending.size:
        if max_trials is None:  # pragma: no cover - needs a zero-mass row
            raise ZeroBackwardMassError("accept-reject did not terminate")
        rows = target[pending]
        uniq, inverse = np.unique(rows, return_inverse=True)
        probs = _normalise_rows(backward_log_weights(model, prev_cloud, x_next[uniq]))
        draws = _categorical_rows(probs[inverse], 1, gen)[:, 0]
        out[pending] = draws
    return out.reshape(n_next, m)


def backward_draws(model, prev_cloud, x_next, m, cfg: BackwardSamplerConfig, rng, table=None):
    """``m`` backward indices for every successor row; shape ``(n_next, m)``.

    ``table`` may pass in the alias table of the previous cloud's weights so
    the accept-reject proposal is not rebuilt.
    """
    rng = as_stream(rng)
    x_next = _as_rows(x_next, model.state_dim)
    gen = rng.generator
    if cfg.kind is SamplerKind.EXACT or prev_cloud.n == 1:
        if prev_cloud.n == 1:
            _normalise_rows(backward_log_weights(model, prev_cloud, x_next))
            return np.zeros((x_next.shape[0], m), dtype=np.intp)
        return _exact_draws(model, prev_cloud, x_next, m, gen)
    if cfg.kind is SamplerKind.ACCEPT_REJECT:
        return _accept_reject_draws(model, prev_cloud, x_next, m, gen, rng, None, table)
    trials = cfg.max_trials if cfg.max_trials is not None else prev_cloud.n
    return _accept_reject_draws(model, prev_cloud, x_next, m, gen, rng, trials, table)


def backward_draw(model, prev_cloud, x_next, cfg: BackwardSamplerConfig, rng) -> int:
    """A single backward index for one successor state."""
    return int(backward_draws(model, prev_cloud, x_next, 1, cfg, rng)[0, 0])


def ffbsm_step(model, prev_cloud, prev_stats, next_cloud, functional) -> BackwardStats:
    b = np.asarray(getattr(prev_stats, "values", prev_stats), dtype=float)
    if b.shape != (prev_cloud.n, functional.dim):
        raise ValueError("statistics do not match the previous cloud")
    probs = _normalise_rows(backward_log_weights(model, prev_cloud, next_cloud.particles))
    terms = functional.term(
        prev_cloud.time_index, prev_cloud.particles[None, :, :], next_cloud.particles[:, None, :]
    )
    new = probs @ b + np.einsum("ij,ijd->id", probs, terms)
    return BackwardStats(new, next_cloud.time_index)


def paris_update(prev_cloud, prev_stats, next_cloud, functional, idx) -> np.ndarray:
    """Statistic update given backward indices ``idx`` of shape ``(N, M)``."""
    b = np.asarray(getattr(prev_stats, "values", prev_stats), dtype=float)
    terms = functional.term(
        prev_cloud.time_index, prev_cloud.particles[idx], next_cloud.particles[:, None, :]
    )
    return (b[idx] + terms).mean(axis=1)


def paris_step(
    model, prev_cloud, prev_stats, next_cloud, functional, m, cfg, rng, table=None
) -> BackwardStats:
    if m < 1:
        raise ValueError("M must be at least 1")
    idx = backward_draws(model, prev_cloud, next_cloud.particles, m, cfg, rng, table)
    return BackwardStats(
        paris_update(prev_cloud, prev_stats, next_cloud, functional, idx), next_cloud.time_index
    )


def _forward_backward_streams(rng):
    rng = as_stream(rng)
    return rng.child("forward"), rng.child("backward")


def paris_run(model, horizon, n, m, functional, cfg: BackwardSamplerConfig, rng):
    """Online PaRIS over ``horizon`` steps.

    Returns ``(estimate, final_cloud, final_stats)`` where the estimate is the
    row mean of the final statistics.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    cfg.validate_for(model)
    fwd, bwd = _forward_backward_streams(rng)
    cloud = pf_init(model, n, fwd)
    stats = BackwardStats.zeros(n, functional.dim)
    for _ in range(horizon):
        table = build_alias(cloud.weights())
        ancestors = table.sample(fwd, n)
        x_next = model.sample_transition(cloud.time_index, cloud.particles[ancestors], fwd)
        nxt = ParticleCloud.from_particles(model, cloud.time_index + 1, x_next)
        stats = paris_step(model, cloud, stats, nxt, functional, m, cfg, bwd, table)
        cloud = nxt
    return stats.mean(), cloud, stats


def ffbsm_run(model, horizon, n, functional, rng):
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    fwd, _ = _forward_backward_streams(rng)
    cloud = pf_init(model, n, fwd)
    stats = BackwardStats.zeros(n, functional.dim)
    for _ in range(horizon):
        _, nxt = pf_step(model, cloud, fwd)
        stats = ffbsm_step(model, cloud, stats, nxt, functional)
        cloud = nxt
    return stats.mean(), cloud, stats
