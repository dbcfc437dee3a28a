"""Score ascent with PPG roll-out gradients and a PGAS baseline.

By Fisher's identity the score is the smoothed expectation of the additive
functional with terms grad log{g_s(x_s) m_s(x_s, x_{s+1})}, so any additive
smoother doubles as a gradient estimator.  Gradients are divided by the
horizon before the Adam update, and the Adam rate decays as lr / sqrt(step).
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import compiled
from .errors import NonFiniteGradientError, UnsupportedParameterError
from .models.crnn import CrnnModel, CrnnParams
from .models.lgssm import (
    LgssmModel,
    LgssmParams,
    lgssm_exact_mle,
    lgssm_exact_score,
    singular_value_distance,
)
from .ppg import lineage_initial_path as initial_path
from .ppg import pgas_iteration, ppg_iteration
from .rng import as_stream
from .smoothing import AdditiveFunctional, BackwardSamplerConfig


class LgssmFamily:
    """LGSSM with free (A, B) and known Q, R, m0, P0.

    ``theta`` is ``[vec(A), vec(B)]`` row-major.  The data record has
    ``T`` rows and the particle target spans states ``0..T``.
    """

    name = "lgssm"

    def __init__(self, base: LgssmParams, observations, free=("A", "B")):
        if tuple(free) != ("A", "B"):
            raise UnsupportedParameterError(f"only (A, B) are learnable, got {free}")
        self.base = base
        self.observations = np.asarray(observations, dtype=float).reshape(-1, base.dy)
        self.dx, self.dy = base.dx, base.dy
        self._q_inv = np.linalg.inv(base.state_cov)
        self._r_inv = np.linalg.inv(base.obs_cov)

    @property
    def horizon(self) -> int:
        return self.observations.shape[0]

    @property
    def dim(self) -> int:
        return self.dx * self.dx + self.dy * self.dx

    def params(self, theta) -> LgssmParams:
        return self.base.with_theta(theta)

    def model(self, theta) -> LgssmModel:
        return LgssmModel(self.params(theta), self.observations)

    def _split(self, theta):
        theta = np.asarray(theta, dtype=float)
        na = self.dx * self.dx
        return theta[:na].reshape(self.dx, self.dx), theta[na:].reshape(self.dy, self.dx)

    def score_functional(self, theta) -> AdditiveFunctional:
        A, B = self._split(theta)
        y = self.observations
        q_inv, r_inv = self._q_inv, self._r_inv

        def term(s, x, x_next):
            x, x_next = np.asarray(x), np.asarray(x_next)
            shape = np.broadcast_shapes(x.shape[:-1], x_next.shape[:-1])
            x = np.broadcast_to(x, shape + (self.dx,))
            da = ((x_next - x @ A.T) @ q_inv)[..., :, None] * x[..., None, :]
            if s < len(y):
                db = ((y[s] - x @ B.T) @ r_inv)[..., :, None] * x[..., None, :]
            else:
                db = np.zeros(shape + (self.dy, self.dx))
            return np.concatenate([da.reshape(shape + (-1,)), db.reshape(shape + (-1,))], axis=-1)

        return AdditiveFunctional(self.dim, term, name="lgssm_score")

    def path_stats(self, path) -> np.ndarray:
        """Sufficient statistics of one path, in the compiled layout."""
        x = np.asarray(path, dtype=float).reshape(-1, self.dx)
        t = x.shape[0] - 1
        y = np.zeros((t, self.dy))
        n_obs = min(t, len(self.observations))
        y[:n_obs] = self.observations[:n_obs]
        head = x[:-1]
        return np.concatenate([(x[1:].T @ head).ravel(), (head.T @ head).ravel(), (y.T @ head).ravel()])

    def grad_from_stats(self, theta, stats) -> np.ndarray:
        """Score from the compiled sufficient statistics (same target)."""
        A, B = self._split(theta)
        s10, s00, sy = compiled.split_stats(stats, self.dx, self.dy)
        ga = self._q_inv @ (s10 - A @ s00)
        gb = self._r_inv @ (sy - B @ s00)
        return np.concatenate([ga.ravel(), gb.ravel()])

    def exact_score(self, theta) -> np.ndarray:
        return lgssm_exact_score(self.params(theta), self.observations)

    def exact_mle(self, start: Optional[LgssmParams] = None, iters=2000, tol=1e-12) -> LgssmParams:
        return lgssm_exact_mle(start or self.base, self.observations, iters, tol)[0]

    def distance(self, theta, reference: LgssmParams) -> float:
        return singular_value_distance(self.params(theta), reference)


class CrnnFamily:
    """CRNN with free (W, B); ``theta`` is ``[vec(W), vec(B)]``."""

    name = "crnn"

    def __init__(self, base: CrnnParams, observations, free=("W", "B")):
        if tuple(free) != ("W", "B"):
            raise UnsupportedParameterError(f"only (W, B) are learnable, got {free}")
        self.base = base
        self.observations = np.asarray(observations, dtype=float).reshape(-1, base.dy)

    @property
    def horizon(self) -> int:
        return self.observations.shape[0]

    @property
    def dim(self) -> int:
        return self.base.W.size + self.base.B.size

    def params(self, theta) -> CrnnParams:
        return self.base.with_theta(theta)

    def model(self, theta) -> CrnnModel:
        return CrnnModel(self.params(theta), self.observations)

    def score_functional(self, theta) -> AdditiveFunctional:
        p = self.params(theta)
        y = self.observations
        cg = p.rate * p.gamma
        nu, sc2 = p.obs_df, p.obs_scale**2

        def term(s, x, x_next):
            x, x_next = np.asarray(x), np.asarray(x_next)
            shape = np.broadcast_shapes(x.shape[:-1], x_next.shape[:-1])
            x = np.broadcast_to(x, shape + (p.dim,))
            resid = (x_next - p.drift(x)) / p.state_var
            dw = resid[..., :, None] * (cg * np.tanh(x))[..., None, :]
            if s < len(y):
                r = y[s] - x @ p.B.T
                db = ((nu + 1) * r / (nu * sc2 + r * r))[..., :, None] * x[..., None, :]
            else:
                db = np.zeros(shape + p.B.shape)
            return np.concatenate([dw.reshape(shape + (-1,)), db.reshape(shape + (-1,))], axis=-1)

        return AdditiveFunctional(self.dim, term, name="crnn_score")


def fisher_functional(family, theta) -> AdditiveFunctional:
    if not hasattr(family, "score_functional"):
        raise UnsupportedParameterError(f"{type(family).__name__} has no analytic score")
    return family.score_functional(theta)


@dataclass(frozen=True)
class AdamState:
    """Adam moments for ascent; the step size at step l is lr / sqrt(l)."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: bool = True

    @classmethod
    def fresh(cls, dim, **kw):
        return cls(np.zeros(dim), np.zeros(dim), **kw)

    def settings(self) -> dict:
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, decay=self.decay)


def adam_step(state: AdamState, theta, grad):
    """One ascent step; returns ``(state', theta')``."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != state.m.shape:
        raise ValueError("gradient and moment shapes differ")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(f"non-finite gradient at step {state.step + 1}: {grad}")
    t = state.step + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    rate = state.lr / math.sqrt(t) if state.decay else state.lr
    theta = np.asarray(theta, dtype=float) + rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=t), theta


def gd_est(model, functional, path, k, k0, n, m, cfg: BackwardSamplerConfig, rng):
    """Roll-out gradient statistics of ``k`` PPG iterations.

    Returns ``(stats, final_path)`` where ``stats`` holds the estimates of
    iterations ``k0+1..k``, one row each; their mean is the roll-out.
    """
    if not 0 <= k0 < k:
        raise ValueError("need 0 <= k0 < k")
    rng = as_stream(rng)
    out = np.empty((k - k0, functional.dim))
    for ell in range(k):
        it = ppg_iteration(model, path, n, m, functional, cfg, rng)
        if ell >= k0:
            out[ell - k0] = it.estimate
        path = it.new_path
    return out, path


@dataclass(frozen=True)
class LearningConfig:
    iterations: int = 500
    n: int = 64
    k: int = 8
    k0: int = 4
    m: int = 2
    sampler: BackwardSamplerConfig = field(default_factory=BackwardSamplerConfig)
    rescale: bool = True
    warm_start: bool = True
    engine: str = "auto"  # auto | numpy | compiled

    def __post_init__(self):
        if self.iterations < 0 or min(self.n, self.k, self.m) < 1 or not 0 <= self.k0 < self.k:
            raise ValueError("invalid learning configuration")
        if self.engine not in ("auto", "numpy", "compiled"):
            raise ValueError(f"unknown engine {self.engine!r}")

    def snapshot(self) -> dict:
        d = asdict(self)
        d["sampler"] = {"kind": self.sampler.kind.value, "max_trials": self.sampler.max_trials}
        return d


@dataclass
class LearningRun:
    thetas: np.ndarray  # (n+1, d), theta_0 first
    grads: np.ndarray  # (n, d), rescaled gradients fed to Adam
    grad_norms: np.ndarray
    d_mle: Optional[np.ndarray]
    wall_ms: np.ndarray
    seed: object
    config: dict

    @property
    def final_theta(self) -> np.ndarray:
        return self.thetas[-1]

    @property
    def iterations(self) -> int:
        return len(self.grads)

    def write_csv(self, path, timing=False):
        d = self.thetas.shape[1]
        cols = ["iteration"] + [f"theta_{i}" for i in range(d)] + ["grad_norm", "d_mle"]
        if timing:
            cols.append("wall_ms")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for i, th in enumerate(self.thetas):
                gn = self.grad_norms[i - 1] if i else float("nan")
                dm = self.d_mle[i] if self.d_mle is not None else float("nan")
                row = [i] + [f"{v:.17g}" for v in th] + [f"{gn:.17g}", f"{dm:.17g}"]
                if timing:
                    row.append(f"{self.wall_ms[i - 1] if i else 0.0:.17g}")
                w.writerow(row)

    def write_snapshot(self, path):
        with open(path, "w") as fh:
            json.dump({"seed": repr(self.seed), "config": self.config}, fh, indent=2, sort_keys=True)


def _use_compiled(family, cfg: LearningConfig) -> bool:
    fast = isinstance(family, LgssmFamily)
    if cfg.engine == "compiled" and not fast:
        raise UnsupportedParameterError("the compiled engine covers the LGSSM family only")
    return fast and cfg.engine != "numpy"


def _ascent(family, theta0, cfg, opt, rng, grad_fn, mle):
    rng = as_stream(rng)
    theta = np.asarray(theta0, dtype=float).copy()
    opt = opt if opt is not None else AdamState.fresh(family.dim)
    horizon = family.horizon
    path = initial_path(family.model(theta), horizon, cfg.n, rng.child("init")).states
    thetas = [theta.copy()]
    grads, norms, wall = [], [], []
    d_mle = [family.distance(theta, mle)] if mle is not None else None
    steps = rng.child("steps")
    for i in range(cfg.iterations):
        t0 = time.perf_counter()
        if not cfg.warm_start:
            path = initial_path(family.model(theta), horizon, cfg.n, steps.child("cold", i)).states
        grad, new_path = grad_fn(theta, path, steps.child(i))
        if new_path.shape != (horizon + 1, path.shape[1]):
            raise RuntimeError("warm-start path has the wrong shape")
        path = new_path
        if cfg.rescale:
            grad = grad / horizon
        opt, theta = adam_step(opt, theta, grad)
        wall.append(1e3 * (time.perf_counter() - t0))
        thetas.append(theta.copy())
        grads.append(grad)
        norms.append(float(np.linalg.norm(grad)))
        if d_mle is not None:
            d_mle.append(family.distance(theta, mle))
    d = family.dim
    snapshot = dict(cfg.snapshot(), family=family.name, adam=opt.settings(), rescale_by=horizon)
    return LearningRun(
        np.array(thetas),
        np.array(grads).reshape(-1, d),
        np.array(norms),
        None if d_mle is None else np.array(d_mle),
        np.array(wall),
        getattr(rng, "seed", rng),
        snapshot,
    )


def score_ascent_ppg(family, theta0, cfg: LearningConfig, rng, opt=None, mle=None) -> LearningRun:
    """Adam ascent on PPG roll-out gradients, passing the frozen path on."""
    fast = _use_compiled(family, cfg)

    def grad_fn(theta, path, rng):
        path = np.asarray(getattr(path, "states", path))
        if fast:
            kernel = compiled.LinearGaussianKernel(family.model(theta))
            roll, _, new_path = compiled.lg_ppg_run(
                kernel, path, cfg.n, cfg.m, cfg.k, cfg.k0, cfg.sampler, rng
            )
            return family.grad_from_stats(theta, roll), new_path
        stats, new_path = gd_est(
            family.model(theta), family.score_functional(theta), path,
            cfg.k, cfg.k0, cfg.n, cfg.m, cfg.sampler, rng,
        )
        return stats.mean(axis=0), new_path.states

    return _ascent(family, theta0, cfg, opt, rng, grad_fn, mle)


def score_ascent_pg(family, theta0, cfg: LearningConfig, rng, opt=None, mle=None) -> LearningRun:
    """Adam ascent on PGAS path draws: the gradient is the mean of the score
    functional along the paths of iterations ``k0+1..k``."""
    fast = _use_compiled(family, cfg)

    def grad_fn(theta, path, rng):
        path = np.asarray(getattr(path, "states", path))
        functional = None if fast else family.score_functional(theta)
        total = np.zeros(family.dim)
        kernel = compiled.LinearGaussianKernel(family.model(theta)) if fast else None
        model = None if fast else family.model(theta)
        for ell in range(cfg.k):
            if fast:
                path = compiled.lg_pgas_iteration(kernel, path, cfg.n, rng.child(ell))
            else:
                path = pgas_iteration(model, path, cfg.n, rng.child(ell)).states
            if ell >= cfg.k0:
                if fast:
                    total += family.grad_from_stats(theta, family.path_stats(path))
                else:
                    total += functional.along_path(path)
        return total / (cfg.k - cfg.k0), path

    return _ascent(family, theta0, cfg, opt, rng, grad_fn, mle)


def sample_theta0(dim, rng, scale=0.1) -> np.ndarray:
    """theta_0 ~ N(0, scale^2 I); the default gives covariance 0.01 I."""
    return scale * as_stream(rng).normal(dim)
