"""Compiled PaRIS, PPG and PGAS sweeps for linear Gaussian models.

The generic numpy implementations pay Python overhead on every time step,
which dominates for the small clouds used in learning.  The sweeps here fuse
one whole pass over ``0..T`` into a numba kernel.  They accumulate the
quadratic sufficient statistics of the LGSSM

    S10 = sum_s x_{s+1} x_s^T,   S00 = sum_s x_s x_s^T,   SY = sum_s y_s x_s^T

(over ``s < T``, with ``y_s = 0`` past the data), flattened row-major into
one vector.  PaRIS statistics are linear in the additive functional, so the
lag-one product and the (A, B) score are exact linear maps of these.

Finite-state HMMs get the same treatment with the scalar lag-one functional
sum_s x_s x_{s+1} on integer state labels; their backward draws are exact.

The kernels draw from the numpy generator of the caller's
:class:`~ppgsmooth.rng.RngStream`, so results are reproducible from the seed;
they consume it in a different order than the numpy code paths.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import AllWeightsZeroError, ZeroBackwardMassError
from .models.discrete import DiscreteHmm
from .models.lgssm import LgssmModel, LgssmParams
from .rng import as_stream
from .smoothing import AdditiveFunctional, BackwardSamplerConfig, SamplerKind

_KIND_CODE = {SamplerKind.EXACT: 0, SamplerKind.ACCEPT_REJECT: 1, SamplerKind.HYBRID: 2}
_NO_CUTOFF = np.iinfo(np.int64).max


def stat_dim(dx, dy) -> int:
    return 2 * dx * dx + dy * dx


def sufficient_functional(dx, dy, observations) -> AdditiveFunctional:
    """The numpy twin of the compiled statistics, same layout."""
    y = np.asarray(observations, dtype=float).reshape(-1, dy)

    def term(s, x, x_next):
        x, x_next = np.asarray(x), np.asarray(x_next)
        shape = np.broadcast_shapes(x.shape[:-1], x_next.shape[:-1])
        x = np.broadcast_to(x, shape + (dx,))
        x_next = np.broadcast_to(x_next, shape + (dx,))
        ys = y[s] if s < len(y) else np.zeros(dy)
        s10 = x_next[..., :, None] * x[..., None, :]
        s00 = x[..., :, None] * x[..., None, :]
        sy = ys[:, None] * x[..., None, :]
        flat = shape + (-1,)
        return np.concatenate([s10.reshape(flat), s00.reshape(flat), sy.reshape(flat)], axis=-1)

    return AdditiveFunctional(stat_dim(dx, dy), term, name="lgssm_sufficient")


def split_stats(stats, dx, dy):
    """``(S10, S00, SY)`` matrices from a flat statistic vector."""
    stats = np.asarray(stats, dtype=float)
    n = dx * dx
    return (
        stats[:n].reshape(dx, dx),
        stats[n : 2 * n].reshape(dx, dx),
        stats[2 * n :].reshape(dy, dx),
    )


def lag_one_from_stats(stats, dx, dy):
    """Sum of x_s x_{s+1}^T, flattened row-major."""
    s10, _, _ = split_stats(stats, dx, dy)
    return s10.T.ravel()


class LinearGaussianKernel:
    """Array bundle of an :class:`LgssmModel` for the compiled sweeps."""

    def __init__(self, model: LgssmModel):
        p: LgssmParams = model.params
        self.dx, self.dy = p.dx, p.dy
        self.A = np.ascontiguousarray(p.A)
        self.B = np.ascontiguousarray(p.B)
        self.trans_chol = np.linalg.cholesky(p.state_cov)
        self.trans_inv = np.ascontiguousarray(model._trans_inv)
        self.trans_norm = float(model._trans_norm)
        self.obs_inv = np.ascontiguousarray(model._obs_inv)
        self.obs_norm = float(model._obs_norm)
        self.m0 = np.ascontiguousarray(p.m0)
        self.init_chol = np.ascontiguousarray(model._init_chol)
        self.obs = np.ascontiguousarray(model.observations)

    def args(self):
        return (
            self.A, self.trans_chol, self.trans_inv, self.trans_norm,
            self.B, self.obs_inv, self.obs_norm, self.m0, self.init_chol, self.obs,
        )


@numba.njit(cache=True, inline="always")
def _log_g(s, xs, i, B, obs_inv, obs_norm, obs, r):
    # log g_s at particle xs[s, i]
    if s >= obs.shape[0]:
        return 0.0
    dy, dx = B.shape
    for a in range(dy):
        acc = obs[s, a]
        for b in range(dx):
            acc -= B[a, b] * xs[s, i, b]
        r[a] = acc
    q = 0.0
    for a in range(dy):
        z = 0.0
        for b in range(a + 1):
            z += obs_inv[a, b] * r[b]
        q += z * z
    return obs_norm - 0.5 * q


@numba.njit(cache=True, inline="always")
def _log_m(xs, s, l, i, A, trans_inv, trans_norm, r):
    # log m_s(xs[s, l], xs[s + 1, i])
    dx = A.shape[0]
    if dx == 1:
        z = (xs[s + 1, i, 0] - A[0, 0] * xs[s, l, 0]) * trans_inv[0, 0]
        return trans_norm - 0.5 * z * z
    for a in range(dx):
        acc = xs[s + 1, i, a]
        for b in range(dx):
            acc -= A[a, b] * xs[s, l, b]
        r[a] = acc
    q = 0.0
    for a in range(dx):
        z = 0.0
        for b in range(a + 1):
            z += trans_inv[a, b] * r[b]
        q += z * z
    return trans_norm - 0.5 * q


@numba.njit(cache=True, inline="always")
def _search(cum, u):
    # first index with cum[idx] > u
    lo, hi = 0, cum.shape[0] - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid] > u:
            hi = mid
        else:
            lo = mid + 1
    return lo


@numba.njit(cache=True, inline="always")
def _weights_cum(logw, cum):
    n = logw.shape[0]
    top = -np.inf
    for j in range(n):
        if logw[j] > top:
            top = logw[j]
    acc = 0.0
    if np.isfinite(top):
        for j in range(n):
            acc += math.exp(logw[j] - top)
            cum[j] = acc
    return acc


@numba.njit(cache=True)
def _build_alias(cum, total, prob, alias, small, large):
    # Vose construction from cumulative weights
    n = cum.shape[0]
    ns = 0
    nl = 0
    prev = 0.0
    for j in range(n):
        prob[j] = (cum[j] - prev) * n / total
        prev = cum[j]
        alias[j] = j
        if prob[j] < 1.0:
            small[ns] = j
            ns += 1
        else:
            large[nl] = j
            nl += 1
    while ns > 0 and nl > 0:
        ns -= 1
        lo = small[ns]
        hi = large[nl - 1]
        alias[lo] = hi
        prob[hi] -= 1.0 - prob[lo]
        if prob[hi] < 1.0:
            nl -= 1
            small[ns] = hi
            ns += 1
    for j in range(nl):
        prob[large[j]] = 1.0
    for j in range(ns):
        prob[small[j]] = 1.0


@numba.njit(cache=True, inline="always")
def _alias_draw(gen, prob, alias):
    u = gen.random() * prob.shape[0]
    k = int(u)
    if k >= prob.shape[0]:
        k = prob.shape[0] - 1
    return k if u - k < prob[k] else alias[k]


@numba.njit(cache=True)
def _init_cloud(gen, xs, m0, init_chol, z):
    n, dx = xs.shape[1], xs.shape[2]
    for i in range(n):
        for a in range(dx):
            z[a] = gen.standard_normal()
        for a in range(dx):
            acc = m0[a]
            for b in range(a + 1):
                acc += init_chol[a, b] * z[b]
            xs[0, i, a] = acc


@numba.njit(cache=True, inline="always")
def _propagate(gen, xs, s, i, anc, A, trans_chol, z):
    dx = xs.shape[2]
    for a in range(dx):
        z[a] = gen.standard_normal()
    for a in range(dx):
        acc = 0.0
        for b in range(dx):
            acc += A[a, b] * xs[s, anc, b]
        for b in range(a + 1):
            acc += trans_chol[a, b] * z[b]
        xs[s + 1, i, a] = acc


@numba.njit(cache=True, inline="always")
def _add_term(out, i, scale, xs, s, j, obs):
    # accumulate the sufficient-statistic term of the pair (xs[s, j], xs[s + 1, i])
    dx = xs.shape[2]
    k = 0
    for a in range(dx):
        for b in range(dx):
            out[i, k] += scale * xs[s + 1, i, a] * xs[s, j, b]
            k += 1
    for a in range(dx):
        for b in range(dx):
            out[i, k] += scale * xs[s, j, a] * xs[s, j, b]
            k += 1
    if s < obs.shape[0]:
        for a in range(obs.shape[1]):
            for b in range(dx):
                out[i, k] += scale * obs[s, a] * xs[s, j, b]
                k += 1


@numba.njit(cache=True)
def _sweep(
    gen, horizon, n, m, kind, max_trials, conditional, path,
    A, trans_chol, trans_inv, trans_norm, B, obs_inv, obs_norm, m0, init_chol, obs,
):
    """One forward pass with PaRIS statistics and backward-path links.

    Returns ``(status, stats, particles, links)``; ``status`` is 0 on
    success, 1 when the filter collapsed and 2 on a zero-mass backward row.
    """
    dx = A.shape[0]
    dy = B.shape[0]
    nstat = 2 * dx * dx + dy * dx
    xs = np.empty((horizon + 1, n, dx))
    links = np.empty((horizon, n), dtype=np.int64)
    stats = np.zeros((n, nstat))
    new_stats = np.empty((n, nstat))
    logw = np.empty(n)
    cum = np.empty(n)
    lrow = np.empty(n)
    crow = np.empty(n)
    z = np.empty(dx)
    buf = np.empty(max(dx, dy))
    prob = np.empty(n)
    alias = np.empty(n, dtype=np.int64)
    small = np.empty(n, dtype=np.int64)
    large = np.empty(n, dtype=np.int64)
    slot = gen.integers(0, n) if conditional else -1
    _init_cloud(gen, xs, m0, init_chol, z)
    if conditional:
        xs[0, slot] = path[0]
    for s in range(horizon):
        for j in range(n):
            logw[j] = _log_g(s, xs, j, B, obs_inv, obs_norm, obs, buf)
        total = _weights_cum(logw, cum)
        if not total > 0.0:
            return 1, stats, xs, links
        _build_alias(cum, total, prob, alias, small, large)
        top = np.max(logw)
        slot = gen.integers(0, n) if conditional else -1
        for i in range(n):
            if i == slot:
                xs[s + 1, i] = path[s + 1]
            else:
                _propagate(gen, xs, s, i, _alias_draw(gen, prob, alias), A, trans_chol, z)
        new_stats[:, :] = 0.0
        for i in range(n):
            have_row = False
            row_total = 0.0
            for r in range(m):
                j = -1
                if kind != 0:
                    trials = 0
                    while trials < max_trials:
                        cand = _alias_draw(gen, prob, alias)
                        lm = _log_m(xs, s, cand, i, A, trans_inv, trans_norm, buf)
                        trials += 1
                        if gen.random() < math.exp(lm - trans_norm):
                            j = cand
                            break
                if j < 0:
                    if not have_row:
                        for l in range(n):
                            lrow[l] = logw[l] - top + _log_m(xs, s, l, i, A, trans_inv, trans_norm, buf)
                        row_total = _weights_cum(lrow, crow)
                        if not row_total > 0.0:
                            return 2, stats, xs, links
                        have_row = True
                    j = _search(crow, gen.random() * row_total)
                if r == 0:
                    links[s, i] = j
                for c in range(nstat):
                    new_stats[i, c] += stats[j, c] / m
                _add_term(new_stats, i, 1.0 / m, xs, s, j, obs)
        stats[:, :] = new_stats
    return 0, stats, xs, links


@numba.njit(cache=True)
def _pgas(gen, horizon, n, path, A, trans_chol, trans_inv, trans_norm, B, obs_inv, obs_norm, m0, init_chol, obs):
    dx = A.shape[0]
    xs = np.empty((horizon + 1, n, dx))
    anc = np.empty((horizon, n), dtype=np.int64)
    logw = np.empty(n)
    cum = np.empty(n)
    lrow = np.empty(n)
    crow = np.empty(n)
    z = np.empty(dx)
    buf = np.empty(max(dx, B.shape[0]))
    prob = np.empty(n)
    alias = np.empty(n, dtype=np.int64)
    small = np.empty(n, dtype=np.int64)
    large = np.empty(n, dtype=np.int64)
    slot = gen.integers(0, n)
    _init_cloud(gen, xs, m0, init_chol, z)
    xs[0, slot] = path[0]
    for s in range(horizon):
        for j in range(n):
            logw[j] = _log_g(s, xs, j, B, obs_inv, obs_norm, obs, buf)
        total = _weights_cum(logw, cum)
        if not total > 0.0:
            return 1, path
        _build_alias(cum, total, prob, alias, small, large)
        slot = gen.integers(0, n)
        for i in range(n):
            if i == slot:
                continue
            a_i = _alias_draw(gen, prob, alias)
            anc[s, i] = a_i
            _propagate(gen, xs, s, i, a_i, A, trans_chol, z)
        # ancestor of the frozen particle drawn prop. to g_s(x_s^l) m_s(x_s^l, zeta_{s+1})
        xs[s + 1, slot] = path[s + 1]
        for l in range(n):
            lrow[l] = logw[l] + _log_m(xs, s, l, slot, A, trans_inv, trans_norm, buf)
        row_total = _weights_cum(lrow, crow)
        if not row_total > 0.0:
            return 2, path
        anc[s, slot] = _search(crow, gen.random() * row_total)
    out = np.empty((horizon + 1, dx))
    i = gen.integers(0, n)
    for s in range(horizon, -1, -1):
        out[s] = xs[s, i]
        if s > 0:
            i = anc[s - 1, i]
    return 0, out


def _kind_args(cfg: BackwardSamplerConfig, n):
    kind = _KIND_CODE[cfg.kind]
    if cfg.kind is SamplerKind.HYBRID:
        trials = cfg.max_trials if cfg.max_trials is not None else n
    else:
        trials = _NO_CUTOFF
    return kind, trials


def _check(status):
    if status == 2:
        raise ZeroBackwardMassError("backward kernel row has zero mass")
    if status == 1:
        raise AllWeightsZeroError("all particle weights are zero")


def lg_sweep(kernel: LinearGaussianKernel, horizon, n, m, cfg, rng, path=None):
    """Raw compiled pass; returns ``(stats, particles, links)``.

    With ``path`` the pass is a conditional PaRIS sweep around it, otherwise
    it is a plain PaRIS run.
    """
    if horizon < 1 or n < 1 or m < 1:
        raise ValueError("need T, N, M >= 1")
    kind, trials = _kind_args(cfg, n)
    cond = path is not None
    p = np.zeros((horizon + 1, kernel.dx)) if path is None else np.asarray(path, dtype=float)
    p = np.ascontiguousarray(p.reshape(horizon + 1, kernel.dx))
    status, stats, xs, links = _sweep(
        as_stream(rng).generator, horizon, n, m, kind, trials, cond, p, *kernel.args()
    )
    _check(status)
    return stats, xs, links


def lg_paris_run(kernel, horizon, n, m, cfg, rng):
    """Mean sufficient statistics from one compiled PaRIS run."""
    stats, _, _ = lg_sweep(kernel, horizon, n, m, cfg, rng)
    return stats.mean(axis=0)


def backward_path(xs, links, i):
    idx = int(i)
    out = np.empty((xs.shape[0],) + xs.shape[2:], dtype=xs.dtype)
    out[-1] = xs[-1, idx]
    for s in range(links.shape[0] - 1, -1, -1):
        idx = links[s, idx]
        out[s] = xs[s, idx]
    return out


def lg_ppg_iteration(kernel, path, n, m, cfg, rng):
    """One compiled PPG iteration; returns ``(mean_stats, new_path)``."""
    rng = as_stream(rng)
    path = np.asarray(path, dtype=float).reshape(-1, kernel.dx)
    stats, xs, links = lg_sweep(kernel, path.shape[0] - 1, n, m, cfg, rng, path)
    j = int(rng.generator.integers(0, n))
    return stats.mean(axis=0), backward_path(xs, links, j)


def lg_ppg_run(kernel, init_path, n, m, k, k0, cfg, rng):
    """Chain ``k`` compiled PPG iterations.

    Returns ``(rollout, per_iteration, final_path)`` in statistic space.
    """
    rng = as_stream(rng)
    path = np.asarray(init_path, dtype=float).reshape(-1, kernel.dx)
    per_iter = np.empty((k, stat_dim(kernel.dx, kernel.dy)))
    for ell in range(k):
        per_iter[ell], path = lg_ppg_iteration(kernel, path, n, m, cfg, rng)
    return per_iter[k0:].mean(axis=0), per_iter, path


def lg_pgas_iteration(kernel, path, n, rng):
    path = np.ascontiguousarray(np.asarray(path, dtype=float).reshape(-1, kernel.dx))
    status, out = _pgas(as_stream(rng).generator, path.shape[0] - 1, n, path, *kernel.args())
    _check(status)
    return out


def lg_initial_path(kernel, horizon, n, rng):
    """One backward path of an unconditional PaRIS pass with M = 1."""
    rng = as_stream(rng)
    _, xs, links = lg_sweep(kernel, horizon, n, 1, BackwardSamplerConfig(), rng)
    return backward_path(xs, links, int(rng.generator.integers(0, n)))


class DiscreteKernel:
    """Array bundle of a :class:`DiscreteHmm` for the compiled sweeps."""

    def __init__(self, hmm: DiscreteHmm):
        with np.errstate(divide="ignore"):
            self.log_trans = np.log(hmm.transition)
            self.log_emis = np.log(hmm.emissions)
        self.cum_init = np.cumsum(hmm.initial)
        self.cum_trans = np.ascontiguousarray(np.cumsum(hmm.transition, axis=1))

    def args(self):
        return self.cum_init, self.cum_trans, self.log_trans, self.log_emis


@numba.njit(cache=True, inline="always")
def _hmm_log_g(s, k, log_emis):
    if s >= log_emis.shape[0]:
        return 0.0
    return log_emis[s, k]


@numba.njit(cache=True, inline="always")
def _hmm_propagate(gen, xs, s, i, a_i, cum_trans):
    k = xs[s, a_i]
    row = cum_trans[k]
    xs[s + 1, i] = _search(row, gen.random() * row[-1])


@numba.njit(cache=True)
def _hmm_sweep(gen, horizon, n, m, conditional, path, cum_init, cum_trans, log_trans, log_emis):
    xs = np.empty((horizon + 1, n), dtype=np.int64)
    links = np.empty((horizon, n), dtype=np.int64)
    stats = np.zeros(n)
    new = np.empty(n)
    logw = np.empty(n)
    cum = np.empty(n)
    lrow = np.empty(n)
    crow = np.empty(n)
    slot = gen.integers(0, n) if conditional else -1
    for i in range(n):
        xs[0, i] = _search(cum_init, gen.random() * cum_init[-1])
    if conditional:
        xs[0, slot] = path[0]
    for s in range(horizon):
        for j in range(n):
            logw[j] = _hmm_log_g(s, xs[s, j], log_emis)
        total = _weights_cum(logw, cum)
        if not total > 0.0:
            return 1, stats, xs, links
        if conditional:
            slot = gen.integers(0, n)
        for i in range(n):
            if i == slot:
                xs[s + 1, i] = path[s + 1]
            else:
                _hmm_propagate(gen, xs, s, i, _search(cum, gen.random() * total), cum_trans)
        for i in range(n):
            k = xs[s + 1, i]
            for l in range(n):
                lrow[l] = logw[l] + log_trans[xs[s, l], k]
            row_total = _weights_cum(lrow, crow)
            if not row_total > 0.0:
                return 2, stats, xs, links
            acc = 0.0
            for j in range(m):
                l = _search(crow, gen.random() * row_total)
                if j == 0:
                    links[s, i] = l
                acc += stats[l] + xs[s, l] * k
            new[i] = acc / m
        stats, new = new, stats
    return 0, stats, xs, links


@numba.njit(cache=True)
def _hmm_pgas(gen, horizon, n, path, cum_init, cum_trans, log_trans, log_emis):
    xs = np.empty((horizon + 1, n), dtype=np.int64)
    anc = np.empty((horizon, n), dtype=np.int64)
    logw = np.empty(n)
    cum = np.empty(n)
    lrow = np.empty(n)
    crow = np.empty(n)
    slot = gen.integers(0, n)
    for i in range(n):
        xs[0, i] = _search(cum_init, gen.random() * cum_init[-1])
    xs[0, slot] = path[0]
    for s in range(horizon):
        for j in range(n):
            logw[j] = _hmm_log_g(s, xs[s, j], log_emis)
        total = _weights_cum(logw, cum)
        if not total > 0.0:
            return 1, path
        slot = gen.integers(0, n)
        for i in range(n):
            if i == slot:
                continue
            a_i = _search(cum, gen.random() * total)
            anc[s, i] = a_i
            _hmm_propagate(gen, xs, s, i, a_i, cum_trans)
        xs[s + 1, slot] = path[s + 1]
        for l in range(n):
            lrow[l] = logw[l] + log_trans[xs[s, l], path[s + 1]]
        row_total = _weights_cum(lrow, crow)
        if not row_total > 0.0:
            return 2, path
        anc[s, slot] = _search(crow, gen.random() * row_total)
    out = np.empty(horizon + 1, dtype=np.int64)
    i = gen.integers(0, n)
    for s in range(horizon, -1, -1):
        out[s] = xs[s, i]
        if s > 0:
            i = anc[s - 1, i]
    return 0, out


def _as_labels(path, horizon=None):
    p = np.ascontiguousarray(np.asarray(path).reshape(-1).astype(np.int64))
    if horizon is not None and p.shape[0] != horizon + 1:
        raise ValueError("path length does not match the horizon")
    return p


def hmm_sweep(kernel: DiscreteKernel, horizon, n, m, rng, path=None):
    """Compiled PaRIS pass (conditional when ``path`` is given) with the
    lag-one functional; returns ``(stats, states, links)``."""
    if horizon < 1 or n < 1 or m < 1:
        raise ValueError("need T, N, M >= 1")
    cond = path is not None
    p = np.zeros(horizon + 1, dtype=np.int64) if path is None else _as_labels(path, horizon)
    status, stats, xs, links = _hmm_sweep(
        as_stream(rng).generator, horizon, n, m, cond, p, *kernel.args()
    )
    _check(status)
    return stats, xs, links


def hmm_ppg_iteration(kernel, path, n, m, rng):
    """One compiled PPG iteration on state labels; returns ``(estimate, new_path)``."""
    rng = as_stream(rng)
    path = _as_labels(path)
    stats, xs, links = hmm_sweep(kernel, path.shape[0] - 1, n, m, rng, path)
    j = int(rng.generator.integers(0, n))
    return stats.mean(), backward_path(xs, links, j)


def hmm_pgas_iteration(kernel, path, n, rng):
    path = _as_labels(path)
    status, out = _hmm_pgas(as_stream(rng).generator, path.shape[0] - 1, n, path, *kernel.args())
    _check(status)
    return out
