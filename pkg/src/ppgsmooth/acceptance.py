"""Built-in acceptance checks.

Each ``criterion_<k>`` function runs one check at its stated scale and
tolerance and returns a :class:`CheckResult`.  Oracles are computed by
independent routes (dense Gaussian conditioning, forward-backward tables,
closed-form densities) rather than by the code under test.  The LGSSM data
record is always simulated from seed 2024.  One-off numba compilation is
done before the clock starts.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats as sps

from . import compiled
from .core import ParticleCloud, pf_loglik
from .experiments import load_config, cmd_bias_k0, cmd_learn, DEFAULT_HMM, sign_test
from .models.discrete import DiscreteHmm, discrete_fb_smooth, discrete_model, sample_smoothing_path
from .models.lgssm import (
    LgssmModel,
    LgssmParams,
    disturbance_smooth,
    lag_one_reference,
    lgssm_loglik,
    lgssm_simulate,
    benchmark_scalar_params,
)
from .ppg import kappa_rate, particle_threshold, pgas_iteration, ppg_iteration
from .rng import RngStream
from .smoothing import (
    BackwardSamplerConfig,
    BackwardStats,
    backward_draws,
    ffbsm_step,
    lag_one_product,
    paris_run,
    paris_step,
    zero_functional,
)

DATA_SEED = 2024


@dataclass
class CheckResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float
    limit: float

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"criterion {self.number:2d} {verdict} {self.name}: {self.detail} "
            f"[{self.seconds:.1f}s, limit {self.limit:g}s]"
        )


def _finish(number, name, ok, detail, t0, limit):
    secs = time.perf_counter() - t0
    return CheckResult(number, name, bool(ok) and secs < limit, detail, secs, limit)


def scalar_data(horizon, seed=DATA_SEED):
    """Observation record y_0..y_{T-1} of the scalar LGSSM."""
    params = benchmark_scalar_params()
    return params, lgssm_simulate(params, horizon, seed)[1][:horizon]


def dense_gaussian_posterior(params: LgssmParams, observations, n_states=None):
    """Smoothing moments by conditioning the full joint Gaussian of (x, y).

    Returns ``(means, covs, lag_one_covs)`` with the same layout as the
    recursive smoother.
    """
    y = np.asarray(observations, dtype=float).reshape(-1, params.dy)
    n_obs = y.shape[0]
    n = n_obs if n_states is None else n_states
    dx, dy = params.dx, params.dy
    # x = mean + L w with w = (x_0 deviation, e_1, ..., e_{n-1})
    L = np.zeros((n * dx, n * dx))
    mean = np.zeros(n * dx)
    init = np.linalg.cholesky(params.P0)
    powers = [np.eye(dx)]
    for _ in range(n):
        powers.append(params.A @ powers[-1])
    for s in range(n):
        rows = slice(s * dx, (s + 1) * dx)
        mean[rows] = powers[s] @ params.m0
        L[rows, :dx] = powers[s] @ init
        for j in range(1, s + 1):
            L[rows, j * dx : (j + 1) * dx] = powers[s - j] @ params.Q
    sxx = L @ L.T
    H = np.kron(np.eye(n)[:n_obs], params.B)
    syy = H @ sxx @ H.T + np.kron(np.eye(n_obs), params.obs_cov)
    sxy = sxx @ H.T
    gain = np.linalg.solve(syy, sxy.T).T
    post_mean = mean + gain @ (y.ravel() - H @ mean)
    post_cov = sxx - gain @ sxy.T
    means = post_mean.reshape(n, dx)
    covs = np.array([post_cov[s * dx : (s + 1) * dx, s * dx : (s + 1) * dx] for s in range(n)])
    lag = np.array(
        [post_cov[s * dx : (s + 1) * dx, (s + 1) * dx : (s + 2) * dx] for s in range(n - 1)]
    )
    return means, covs, lag


def criterion_1() -> CheckResult:
    t0 = time.perf_counter()
    params, y = scalar_data(20)
    sm = disturbance_smooth(params, y)
    means, covs, lag = dense_gaussian_posterior(params, y)
    err = max(
        np.max(np.abs(sm.means - means)),
        np.max(np.abs(sm.covs - covs)),
        np.max(np.abs(sm.lag_one_covs - lag)),
    )
    return _finish(1, "oracle exactness", err < 1e-8, f"max abs error {err:.2e} (< 1e-8)", t0, 1.0)


def fixed_cloud(n=8, seed=5):
    """An 8-particle scalar LGSSM cloud at time 3 and a successor state."""
    params, y = scalar_data(10)
    model = LgssmModel(params, y)
    gen = RngStream(seed).generator
    cloud = ParticleCloud.from_particles(model, 3, gen.normal(0.0, 1.5, (n, 1)))
    return model, cloud, np.array([[0.4]])


def _closed_form_backward(model, cloud, x_next):
    # Lambda row from scalar normal densities, written out directly
    p = model.params
    g = sps.norm.pdf(model.observations[cloud.time_index, 0], p.B[0, 0] * cloud.particles[:, 0], p.R[0, 0])
    m = sps.norm.pdf(x_next[0, 0], p.A[0, 0] * cloud.particles[:, 0], p.Q[0, 0])
    w = g * m
    return w / w.sum()


def criterion_2() -> CheckResult:
    t0 = time.perf_counter()
    model, cloud, x_next = fixed_cloud()
    probs = _closed_form_backward(model, cloud, x_next)
    draws = 100_000
    samplers = {
        "exact": BackwardSamplerConfig("exact"),
        "accept_reject": BackwardSamplerConfig("accept_reject"),
        "hybrid": BackwardSamplerConfig("hybrid"),
        "hybrid(max_trials=1)": BackwardSamplerConfig("hybrid", 1),
    }
    pvals = {}
    for i, (name, cfg) in enumerate(samplers.items()):
        idx = backward_draws(model, cloud, x_next, draws, cfg, RngStream(11).child(i))
        counts = np.bincount(idx.ravel(), minlength=cloud.n)
        pvals[name] = sps.chisquare(counts, probs * draws).pvalue
    ok = min(pvals.values()) > 1e-3
    detail = ", ".join(f"{k} p={v:.3f}" for k, v in pvals.items()) + " (> 0.001)"
    return _finish(2, "sampler equivalence", ok, detail, t0, 5.0)


def criterion_3() -> CheckResult:
    t0 = time.perf_counter()
    model, prev, _ = fixed_cloud()
    gen = RngStream(12).generator
    nxt = ParticleCloud.from_particles(model, 4, gen.normal(0.0, 1.5, (8, 1)))
    f = lag_one_product(1)
    stats = BackwardStats(gen.normal(size=(8, 1)), 3)
    exact = ffbsm_step(model, prev, stats, nxt, f).values
    reps = 10_000
    rng = RngStream(13)
    cfg = BackwardSamplerConfig("hybrid")
    out = np.empty((reps,) + exact.shape)
    for r in range(reps):
        out[r] = paris_step(model, prev, stats, nxt, f, 2, cfg, rng).values
    se = out.std(axis=0, ddof=1) / math.sqrt(reps)
    z = np.abs(out.mean(axis=0) - exact) / se
    return _finish(3, "Rao-Blackwell identity", np.all(z < 3), f"max |z| {z.max():.2f} over {z.size} entries (< 3)", t0, 10.0)


def criterion_4() -> CheckResult:
    params, y = scalar_data(100)
    model = LgssmModel(params, y)
    ref = lag_one_reference(params, y, 100)[0]
    f = lag_one_product(1)
    cfg = BackwardSamplerConfig("hybrid")
    t0 = time.perf_counter()
    est = np.array(
        [paris_run(model, 100, 200, 2, f, cfg, RngStream(4).child(r))[0][0] for r in range(200)]
    )
    se = est.std(ddof=1) / math.sqrt(est.size)
    z = (est.mean() - ref) / se
    detail = f"mean {est.mean():.4f} vs exact {ref:.4f}, SE {se:.4f}, z {z:+.2f} (|z| < 3)"
    return _finish(4, "PaRIS correctness", abs(z) < 3, detail, t0, 60.0)


def discrete_check_hmm():
    return DiscreteHmm(**DEFAULT_HMM)


def marginal_tv(counts, marginals):
    freq = counts / counts.sum(axis=1, keepdims=True)
    return 0.5 * np.abs(freq - marginals).sum(axis=1)


def _chain_tv(step, path, iterations, marginals):
    counts = np.zeros_like(marginals)
    rows = np.arange(marginals.shape[0])
    for _ in range(iterations):
        path = step(path)
        counts[rows, np.asarray(path).reshape(-1).astype(np.intp)] += 1
    return marginal_tv(counts, marginals).max()


def criterion_5(generic_iterations=20_000) -> CheckResult:
    """Compiled kernels at 10^5 iterations, generic kernels as a second route."""
    hmm = discrete_check_hmm()
    horizon, n = 5, 5
    kernel = compiled.DiscreteKernel(hmm)
    warm = np.zeros(horizon + 1, dtype=np.int64)
    compiled.hmm_ppg_iteration(kernel, warm, n, 2, RngStream(0))
    compiled.hmm_pgas_iteration(kernel, warm, n, RngStream(0))
    t0 = time.perf_counter()
    marg = discrete_fb_smooth(hmm, horizon).marginals
    model = discrete_model(hmm)
    f = zero_functional()
    cfg = BackwardSamplerConfig("exact")
    tv = {}
    for name, stream_id in (("ppg", 1), ("pgas", 2)):
        rng = RngStream(50).child(stream_id)
        start = sample_smoothing_path(hmm, horizon, rng.child("start")).reshape(-1)
        if name == "ppg":
            fast = lambda p: compiled.hmm_ppg_iteration(kernel, p, n, 2, rng)[1]  # noqa: E731
            slow = lambda p: ppg_iteration(model, p, n, 2, f, cfg, rng).new_path.states  # noqa: E731
        else:
            fast = lambda p: compiled.hmm_pgas_iteration(kernel, p, n, rng)  # noqa: E731
            slow = lambda p: pgas_iteration(model, p, n, rng).states  # noqa: E731
        tv[name] = _chain_tv(fast, start.astype(np.int64), 100_000, marg)
        tv[name + "/numpy"] = _chain_tv(slow, start.astype(float), generic_iterations, marg)
    ok = max(tv.values()) <= 0.02
    detail = ", ".join(f"{k} TV {v:.4f}" for k, v in tv.items())
    detail += f" (<= 0.02; 1e5 compiled, {generic_iterations} numpy iterations)"
    return _finish(5, "PPG/PGAS invariance", ok, detail, t0, 120.0)


def _warm_lgssm():
    params, y = scalar_data(5)
    kernel = compiled.LinearGaussianKernel(LgssmModel(params, y))
    cfg = BackwardSamplerConfig("hybrid")
    path = compiled.lg_initial_path(kernel, 5, 4, RngStream(0))
    compiled.lg_paris_run(kernel, 5, 4, 2, cfg, RngStream(0))
    compiled.lg_ppg_run(kernel, path, 4, 2, 2, 1, cfg, RngStream(0))
    compiled.lg_pgas_iteration(kernel, path, 4, RngStream(0))


def equal_budget_errors(reps, horizon=200, budget=500, k=10, m=2, seed=6):
    """Errors of PaRIS(N = C) and PPG(N = C/k, k, k0 = k/2) runs."""
    params, y = scalar_data(horizon)
    kernel = compiled.LinearGaussianKernel(LgssmModel(params, y))
    ref = lag_one_reference(params, y, horizon)[0]
    cfg = BackwardSamplerConfig("hybrid")
    n_ppg = budget // k
    root = RngStream(seed)
    paris, ppg = np.empty(reps), np.empty(reps)
    for r in range(reps):
        s = root.child("paris", r)
        paris[r] = compiled.lg_paris_run(kernel, horizon, budget, m, cfg, s)[0]
        s = root.child("ppg", r)
        path = compiled.lg_initial_path(kernel, horizon, n_ppg, s.child("init"))
        roll, _, _ = compiled.lg_ppg_run(kernel, path, n_ppg, m, k, k // 2, cfg, s.child("chain"))
        ppg[r] = roll[0]
    return paris - ref, ppg - ref


def criterion_6(reps=3000) -> CheckResult:
    _warm_lgssm()
    t0 = time.perf_counter()
    e_paris, e_ppg = equal_budget_errors(reps)
    z = sps.norm.ppf(0.975)

    def ci(e):
        m, se = e.mean(), e.std(ddof=1) / math.sqrt(e.size)
        return m, (m - z * se, m + z * se)

    b_paris, ci_paris = ci(e_paris)
    b_ppg, ci_ppg = ci(e_ppg)
    separate = ci_paris[1] < ci_ppg[0] or ci_ppg[1] < ci_paris[0]
    # PPG errors should sit on the opposite side of the PaRIS bias
    toward = -np.sign(b_paris)
    _, _, p_sign = sign_test(toward * e_paris, toward * e_ppg)
    ok = abs(b_ppg) < abs(b_paris) and (separate or p_sign < 0.05)
    detail = (
        f"bias PaRIS {b_paris:+.3f} [{ci_paris[0]:+.3f}, {ci_paris[1]:+.3f}], "
        f"PPG {b_ppg:+.3f} [{ci_ppg[0]:+.3f}, {ci_ppg[1]:+.3f}], "
        f"CIs {'disjoint' if separate else 'overlap'}, sign test p={p_sign:.3g}, {reps} reps"
    )
    return _finish(6, "bias reduction at equal budget", ok, detail, t0, 600.0)


def criterion_7(reps=2000) -> CheckResult:
    _warm_lgssm()
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        cfg = load_config(
            "bias-k0",
            raw={
                "model": {"horizon": 200, "data_seed": DATA_SEED},
                "run": {"replicates": reps, "seed": 7, "output": str(Path(tmp) / "bias.csv")},
                "bias_k0": {"n": 64, "k_grid": [8], "k0_rule": ["half"], "decay_grid": [1, 2, 4, 8]},
            },
        )
        res = cmd_bias_k0(cfg)
    _, ells, biases, ses, passed = res.summary[0]
    detail = f"|bias| at l={ells.replace(' ', ',')}: {biases.replace(' ', ', ')} (SE {ses.replace(' ', ', ')})"
    return _finish(7, "burn-in decay", passed, detail, t0, 300.0)


def criterion_8() -> CheckResult:
    t0 = time.perf_counter()
    params, y = scalar_data(50)
    model = LgssmModel(params, y)
    exact = lgssm_loglik(params, y)
    est = np.array([pf_loglik(model, 50, 1000, RngStream(8).child(r)) for r in range(200)])
    se = est.std(ddof=1) / math.sqrt(est.size)
    z = (est.mean() - exact) / se
    detail = f"mean {est.mean():.4f} vs Kalman {exact:.4f}, SE {se:.4f}, z {z:+.2f} (|z| < 3)"
    return _finish(8, "likelihood estimator", abs(z) < 3, detail, t0, 60.0)


def criterion_9(seeds=25, iterations=500) -> CheckResult:
    _warm_lgssm()
    t0 = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        cfg = load_config(
            "learn",
            raw={
                "model": {"horizon": 200, "data_seed": DATA_SEED},
                "run": {"seed": 9, "output": str(Path(tmp) / "learn.csv")},
                "learn": {"seeds": seeds, "iterations": iterations, "n": 64, "k": 8, "k0": 4},
            },
        )
        res = cmd_learn(cfg)
    d_ppg = np.array([r[2] for r in res.records if r[0] == "ppg"])
    d_pgas = np.array([r[2] for r in res.records if r[0] == "pgas"])
    wins, pairs, p = sign_test(d_ppg, d_pgas)
    med_ppg, med_pgas = np.median(d_ppg), np.median(d_pgas)
    ok = med_ppg < 0.05 and med_ppg <= med_pgas and p < 0.05
    detail = (
        f"median D_mle PPG {med_ppg:.4f} (< 0.05), PGAS {med_pgas:.4f}; "
        f"PPG closer on {wins}/{pairs} seeds, sign test p={p:.3g} (< 0.05)"
    )
    return _finish(9, "learning", ok, detail, t0, 1800.0)


def criterion_10() -> CheckResult:
    t0 = time.perf_counter()
    kappa, _ = kappa_rate(1.0, 100, 1)
    hand = 1.0 - 0.965 / 1.12  # (1 - 3.5/100) / (1 + 12/100)
    grid = [5, 10, 20, 50, 100, 200, 500, 1000, 10_000]
    rho, t = 1.0, 1
    assert particle_threshold(rho, t) < grid[0]
    ks = np.array([kappa_rate(rho, n, t)[0] for n in grid])
    ok = abs(kappa - 0.138393) <= 1e-6 and abs(kappa - hand) < 1e-12
    ok = ok and np.all((ks > 0) & (ks < 1)) and np.all(np.diff(ks) < 0)
    detail = f"kappa(1, t=1, N=100) = {kappa:.7f} (hand {hand:.7f}); kappa in (0,1) and decreasing over N={grid}"
    return _finish(10, "mixing diagnostics", ok, detail, t0, 1.0)


CRITERIA = {
    1: criterion_1,
    2: criterion_2,
    3: criterion_3,
    4: criterion_4,
    5: criterion_5,
    6: criterion_6,
    7: criterion_7,
    8: criterion_8,
    9: criterion_9,
    10: criterion_10,
}

# which checks ``<command> --check`` runs
COMMAND_CHECKS = {
    "smooth": (1, 2, 3, 4, 5, 6),
    "bias-k0": (7,),
    "simulate": (8,),
    "learn": (9,),
    "diag": (10,),
}


def run_checks(numbers, echo=print):
    results = []
    for k in numbers:
        res = CRITERIA[k]()
        echo(res.line())
        results.append(res)
    return results
