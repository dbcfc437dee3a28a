"""Experiment configs, replicate pools and CSV output for the command line.

A config is a TOML document with the sections ``model``, ``run``,
``bias_k0``, ``learn`` and ``diag``.  Every key has a declared type and a
default; unknown keys and ill-typed values raise :class:`ConfigError`
before anything runs.  Results are plain CSV with a leading comment line
carrying the SHA-256 of the canonical config and the seed, so a rerun of
the same config reproduces the data rows byte for byte.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats as sps

from . import compiled
from .core import pf_loglik
from .errors import ConfigError, NonpositiveBoundError, SmcError
from .learning import (
    AdamState,
    CrnnFamily,
    LearningConfig,
    LgssmFamily,
    sample_theta0,
    score_ascent_pg,
    score_ascent_ppg,
)
from .models.crnn import CrnnModel, CrnnParams, crnn_simulate
from .models.discrete import DiscreteHmm, discrete_fb_smooth, discrete_model
from .models.lgssm import LgssmModel, LgssmParams, lag_one_reference, lgssm_simulate
from .ppg import (
    RolloutConfig,
    backward_initial_path,
    lineage_initial_path,
    mixing_diagnostics,
    particle_threshold,
    pgas_iteration,
    ppg_run,
    rho_bound,
)
from .rng import RngStream
from .smoothing import BackwardSamplerConfig, ffbsm_run, lag_one_product, paris_run, zero_functional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - depends on the interpreter
    import tomli as tomllib

ALGORITHMS = ("paris", "ffbsm", "ppg", "pgas")
MODEL_KINDS = ("lgssm", "crnn", "discrete")

# a small three-state chain with five informative potentials
DEFAULT_HMM = dict(
    transition=[[0.7, 0.2, 0.1], [0.15, 0.7, 0.15], [0.1, 0.3, 0.6]],
    emissions=[[0.9, 0.3, 0.1], [0.2, 0.8, 0.3], [0.1, 0.4, 0.9], [0.5, 0.5, 0.2], [0.3, 0.6, 0.7]],
    initial=[0.5, 0.3, 0.2],
)

# section -> key -> (type tag, default); None marks "unset"
SCHEMA = {
    "model": {
        "kind": ("str", "lgssm"),
        "A": ("matrix", 0.97),
        "Q": ("matrix", 0.60),
        "B": ("matrix", 0.54),
        "R": ("matrix", 0.33),
        "m0": ("vector", 0.0),
        "P0": ("matrix", 1.0),
        "horizon": ("int", 100),
        "data": ("str", ""),
        "data_seed": ("int", 2024),
        "transition": ("matrix", None),
        "emissions": ("matrix", None),
        "initial": ("vector", None),
        "dim": ("int", 2),
        "dy": ("int", 2),
        "param_seed": ("int", 0),
        "tau": ("float", 1.0),
        "delta": ("float", 0.03),
        "gamma": ("float", 2.5),
        "state_var": ("float", 0.01),
        "obs_scale": ("float", 0.1),
        "obs_df": ("float", 2.0),
        "init_scale": ("float", 1.0),
    },
    "run": {
        "algorithm": ("strlist", ["paris"]),
        "n": ("int", None),
        "m": ("int", 2),
        "k": ("int", None),
        "k0": ("int", None),
        "budget": ("int", None),
        "grid": ("intlist", None),
        "replicates": ("int", 200),
        "seed": ("int", 0),
        "sampler": ("str", "hybrid"),
        "max_trials": ("int", None),
        "functional": ("str", "lag_one"),
        "engine": ("str", "auto"),
        "init": ("str", "backward"),
        "init_n": ("int", None),
        "output": ("str", "results.csv"),
        "timing": ("bool", False),
    },
    "bias_k0": {
        "n": ("int", 64),
        "k_grid": ("intlist", [2, 4, 8, 16]),
        "k0_rule": ("strlist", ["last", "half"]),
        "decay_grid": ("intlist", [1, 2, 4, 8]),
    },
    "learn": {
        "methods": ("strlist", ["ppg", "pgas"]),
        "seeds": ("int", 25),
        "iterations": ("int", 500),
        "n": ("int", 64),
        "k": ("int", 8),
        "k0": ("int", 4),
        "m": ("int", 2),
        "lr": ("float", 0.2),
        "theta0_scale": ("float", 0.1),
        "nll_particles": ("int", 1000),
        "output_dir": ("str", "learn_runs"),
    },
    "diag": {
        "rho": ("float", None),
        "g_bounds": ("matrix", None),
        "m_bounds": ("matrix", None),
        "t": ("int", 1),
        "n_grid": ("intlist", [5, 10, 20, 50, 100, 200, 500, 1000]),
    },
}


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _coerce(tag, value, where):
    """Check ``value`` against a type tag and return its canonical form."""
    bad = ConfigError(f"{where}: expected {tag}, got {value!r}")
    if value is None:
        return None
    if tag == "str":
        if not isinstance(value, str):
            raise bad
        return value
    if tag == "bool":
        if not isinstance(value, bool):
            raise bad
        return value
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if tag == "float":
        if not _is_num(value):
            raise bad
        return float(value)
    if tag in ("strlist", "intlist"):
        items = value if isinstance(value, list) else [value]
        inner = "str" if tag == "strlist" else "int"
        return [_coerce(inner, v, where) for v in items]
    if tag in ("matrix", "vector"):
        try:
            arr = np.asarray(value, dtype=float)
        except (TypeError, ValueError):
            raise bad from None
        if arr.ndim > 2 or not np.all(np.isfinite(arr)):
            raise bad
        if tag == "vector":
            return arr.reshape(-1).tolist()
        return np.atleast_2d(arr).tolist()
    raise AssertionError(tag)  # pragma: no cover


def default_sections() -> dict:
    return {
        sec: {k: _coerce(tag, copy.deepcopy(d), f"{sec}.{k}") for k, (tag, d) in keys.items()}
        for sec, keys in SCHEMA.items()
    }


def parse_override(text):
    """``section.key=value`` with a TOML value; bare words become strings."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(f"override key {key!r} must be section.key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return parts[0], parts[1], value


@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    sections: dict

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def model(self):
        return self.sections["model"]

    @property
    def run(self):
        return self.sections["run"]

    def canonical(self) -> str:
        return json.dumps({"command": self.command, **self.sections}, sort_keys=True)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()

    @property
    def seed(self) -> int:
        return self.run["seed"]


def load_config(command, path=None, overrides=(), raw=None) -> ExperimentConfig:
    """Merge defaults, a TOML file (or dict ``raw``) and ``--set`` overrides."""
    merged = default_sections()
    doc = dict(raw or {})
    if path is not None:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    updates = [(sec, k, v) for sec, body in doc.items() for k, v in _section_items(sec, body)]
    updates += [parse_override(o) for o in overrides]
    for sec, key, value in updates:
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
        if key not in SCHEMA[sec]:
            raise ConfigError(f"unknown key {sec}.{key}")
        merged[sec][key] = _coerce(SCHEMA[sec][key][0], value, f"{sec}.{key}")
    cfg = ExperimentConfig(command, merged)
    validate(cfg)
    return cfg


def _section_items(sec, body):
    if not isinstance(body, dict):
        raise ConfigError(f"[{sec}] must be a table")
    return body.items()


def _positive(cfg, sec, *keys):
    for k in keys:
        v = cfg[sec][k]
        if v is not None and v < 1:
            raise ConfigError(f"{sec}.{k} must be positive")


def validate(cfg: ExperimentConfig):
    model, run = cfg.model, cfg.run
    if model["kind"] not in MODEL_KINDS:
        raise ConfigError(f"model.kind must be one of {MODEL_KINDS}")
    for a in run["algorithm"]:
        if a not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {a!r}")
    if run["sampler"] not in ("exact", "accept_reject", "hybrid"):
        raise ConfigError(f"unknown sampler {run['sampler']!r}")
    if run["functional"] not in ("lag_one", "zero"):
        raise ConfigError(f"unknown functional {run['functional']!r}")
    if run["engine"] not in ("auto", "numpy", "compiled"):
        raise ConfigError(f"unknown engine {run['engine']!r}")
    if run["init"] not in ("backward", "lineage"):
        raise ConfigError(f"unknown init {run['init']!r}")
    if model["kind"] == "crnn" and run["sampler"] != "hybrid":
        raise ConfigError("the CRNN potential has no positive lower bound; use the hybrid sampler")
    if model["kind"] == "discrete" and run["sampler"] != "exact":
        raise ConfigError("discrete models have no density bound; use the exact sampler")
    if model["kind"] == "discrete" and model["data"]:
        raise ConfigError("discrete models take their potentials from model.emissions")
    if run["engine"] == "compiled" and model["kind"] == "crnn":
        raise ConfigError("the compiled engine covers the LGSSM and discrete models only")
    _positive(cfg, "model", "horizon", "dim", "dy")
    _positive(cfg, "run", "n", "m", "k", "budget", "replicates", "max_trials", "init_n")
    if run["seed"] < 0 or model["data_seed"] < 0:
        raise ConfigError("seeds must be non-negative")
    if run["k0"] is not None and run["k"] is not None and not 0 <= run["k0"] < run["k"]:
        raise ConfigError("need 0 <= run.k0 < run.k")
    c, n, k, grid = run["budget"], run["n"], run["k"], run["grid"]
    if c is not None and n is not None and k is not None and n * k != c:
        raise ConfigError(f"budget {c} differs from N*k = {n * k}")
    if grid is not None:
        if c is None:
            raise ConfigError("run.grid needs run.budget")
        for kk in grid:
            if kk < 2 or c % kk:
                raise ConfigError(f"grid value {kk} must be >= 2 and divide the budget {c}")
    b = cfg["bias_k0"]
    _positive(cfg, "bias_k0", "n")
    if any(kk < 1 for kk in b["k_grid"] + b["decay_grid"]):
        raise ConfigError("bias_k0 grids need positive iteration counts")
    if any(r not in ("last", "half") for r in b["k0_rule"]):
        raise ConfigError("bias_k0.k0_rule entries must be 'last' or 'half'")
    lr = cfg["learn"]
    if any(mth not in ("ppg", "pgas") for mth in lr["methods"]):
        raise ConfigError("learn.methods entries must be 'ppg' or 'pgas'")
    if lr["seeds"] < 1 or lr["iterations"] < 0 or not 0 <= lr["k0"] < lr["k"]:
        raise ConfigError("learn needs seeds >= 1, iterations >= 0 and 0 <= k0 < k")
    _positive(cfg, "learn", "n", "m", "nll_particles")
    d = cfg["diag"]
    if d["t"] < 1 or any(v < 1 for v in d["n_grid"]):
        raise ConfigError("diag.t and diag.n_grid entries must be positive")


# ---------------------------------------------------------------- problems


@dataclass
class Problem:
    """A model with its data, functional and (when one exists) the oracle value."""

    kind: str
    model: object
    horizon: int
    observations: Optional[np.ndarray]
    functional: object
    reference: np.ndarray
    params: object = None
    hmm: Optional[DiscreteHmm] = None

    @property
    def dim(self) -> int:
        return self.functional.dim


def read_observations(path, dy=None) -> np.ndarray:
    """Observation CSV: header ``y_1..y_dy``, one row per time step."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    if not rows:
        raise ConfigError(f"{path}: empty observation file")
    header = [h.strip() for h in rows[0]]
    if header != [f"y_{i + 1}" for i in range(len(header))]:
        raise ConfigError(f"{path}: header must be y_1..y_d, got {header}")
    if dy is not None and len(header) != dy:
        raise ConfigError(f"{path}: expected {dy} observation columns, got {len(header)}")
    try:
        y = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return y.reshape(-1, len(header))


def write_table(path, header, rows, cfg: ExperimentConfig):
    """CSV with a provenance comment line; floats keep 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_sha256={cfg.sha256} seed={cfg.seed} command={cfg.command}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return v


def lgssm_params(model_cfg) -> LgssmParams:
    m = model_cfg
    return LgssmParams(m["A"], m["Q"], m["B"], m["R"], m["m0"], m["P0"])


def crnn_params(model_cfg) -> CrnnParams:
    m = model_cfg
    extra = {k: m[k] for k in ("tau", "delta", "gamma", "state_var", "obs_scale", "obs_df", "init_scale")}
    return CrnnParams.default(RngStream(m["param_seed"]), m["dim"], m["dy"], **extra)


def discrete_hmm(model_cfg) -> DiscreteHmm:
    m = model_cfg
    entries = {k: m[k] if m[k] is not None else DEFAULT_HMM[k] for k in DEFAULT_HMM}
    return DiscreteHmm(entries["transition"], entries["emissions"], entries["initial"])


def simulate_dataset(cfg: ExperimentConfig):
    """States and observations at times ``0..T-1`` from ``model.data_seed``."""
    m = cfg.model
    horizon = m["horizon"]
    stream = RngStream(m["data_seed"])
    if m["kind"] == "lgssm":
        x, y = lgssm_simulate(lgssm_params(m), horizon, stream)
    elif m["kind"] == "crnn":
        x, y = crnn_simulate(crnn_params(m), horizon, stream)
    else:
        raise ConfigError("simulation covers the LGSSM and CRNN models")
    return x[:horizon], y[:horizon]


def _observations(cfg):
    m = cfg.model
    if m["data"]:
        dy = len(m["B"]) if m["kind"] == "lgssm" else m["dy"]
        y = read_observations(m["data"], dy)
        if len(y) < m["horizon"]:
            raise ConfigError(f"data has {len(y)} rows, fewer than horizon {m['horizon']}")
        return y[: m["horizon"]]
    return simulate_dataset(cfg)[1]


def _discrete_lag_one(hmm, horizon):
    pair = discrete_fb_smooth(hmm, horizon).pairwise
    k = np.arange(hmm.n_states, dtype=float)
    return np.array([np.einsum("sij,i,j->", pair, k, k)])


_PROBLEMS = {}


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Model, data and oracle for a config; cached per process."""
    key = json.dumps(cfg.model, sort_keys=True) + cfg.run["functional"]
    if cfg.model["data"]:
        try:
            key += hashlib.sha256(Path(cfg.model["data"]).read_bytes()).hexdigest()
        except OSError as exc:
            raise ConfigError(f"cannot read data file: {exc}") from exc
    if key in _PROBLEMS:
        return _PROBLEMS[key]
    m = cfg.model
    horizon = m["horizon"]
    if m["kind"] == "lgssm":
        params = lgssm_params(m)
        y = _observations(cfg)
        model = LgssmModel(params, y)
        reference = lag_one_reference(params, y, horizon)
        prob = Problem("lgssm", model, horizon, y, None, reference, params=params)
    elif m["kind"] == "crnn":
        params = crnn_params(m)
        y = _observations(cfg)
        model = CrnnModel(params, y)
        reference = np.full(params.dim**2, np.nan)
        prob = Problem("crnn", model, horizon, y, None, reference, params=params)
    else:
        hmm = discrete_hmm(m)
        model = discrete_model(hmm)
        prob = Problem("discrete", model, horizon, None, None, _discrete_lag_one(hmm, horizon), hmm=hmm)
    dx = model.state_dim
    prob.functional = lag_one_product(dx) if cfg.run["functional"] == "lag_one" else zero_functional(dx * dx)
    _PROBLEMS[key] = prob
    return prob


# ------------------------------------------------------------- replicates


@dataclass(frozen=True)
class AlgoSpec:
    """One cell of a smoothing experiment."""

    algorithm: str
    n: int
    m: int
    k: int = 1
    k0: int = 0

    @property
    def budget(self) -> int:
        return self.n * self.k


def smooth_specs(cfg: ExperimentConfig):
    """Expand algorithms and the budget grid into experiment cells."""
    run = cfg.run
    c, grid = run["budget"], run["grid"]
    out = []
    for algo in run["algorithm"]:
        if algo in ("paris", "ffbsm"):
            n = run["n"] if run["n"] is not None else (c if c is not None else 100)
            out.append(AlgoSpec(algo, n, run["m"]))
            continue
        if grid is not None:
            for k in grid:
                out.append(AlgoSpec(algo, c // k, run["m"], k, k // 2))
            continue
        k = run["k"] if run["k"] is not None else 2
        if run["n"] is not None:
            n = run["n"]
        elif c is not None:
            if c % k:
                raise ConfigError(f"budget {c} is not a multiple of k = {k}")
            n = c // k
        else:
            n = 100
        k0 = run["k0"] if run["k0"] is not None else k // 2
        if not 0 <= k0 < k:
            raise ConfigError("need 0 <= k0 < k")
        out.append(AlgoSpec(algo, n, run["m"], k, k0))
    return out


def sampler_config(cfg) -> BackwardSamplerConfig:
    return BackwardSamplerConfig(cfg.run["sampler"], cfg.run["max_trials"])


def _compiled_route(cfg, prob):
    if cfg.run["engine"] == "numpy" or cfg.run["functional"] != "lag_one":
        if cfg.run["engine"] == "compiled":
            raise ConfigError("the compiled engine only evaluates the lag-one functional")
        return False
    return prob.kind in ("lgssm", "discrete")


def initial_path(cfg, prob, n, stream):
    """Starting frozen path of a PPG or PGAS chain."""
    n_init = cfg.run["init_n"] or n
    if cfg.run["init"] == "lineage":
        return lineage_initial_path(prob.model, prob.horizon, n_init, stream).states
    if prob.kind == "lgssm" and _compiled_route(cfg, prob):
        kernel = compiled.LinearGaussianKernel(prob.model)
        return compiled.lg_initial_path(kernel, prob.horizon, n_init, stream)
    return backward_initial_path(prob.model, prob.horizon, n_init, stream, sampler_config(cfg)).states


def chain_estimates(cfg, prob, algo: AlgoSpec, stream, iterations=None):
    """Per-iteration estimates of a PPG (or PGAS) chain, shape ``(k, dim)``."""
    k = algo.k if iterations is None else iterations
    path = initial_path(cfg, prob, algo.n, stream.child("init"))
    chain = stream.child("chain")
    fast = _compiled_route(cfg, prob)
    f = prob.functional
    out = np.empty((k, prob.dim))
    if algo.algorithm == "pgas":
        hmm_kernel = compiled.DiscreteKernel(prob.hmm) if fast and prob.kind == "discrete" else None
        lg_kernel = compiled.LinearGaussianKernel(prob.model) if fast and prob.kind == "lgssm" else None
        for ell in range(k):
            if hmm_kernel is not None:
                path = compiled.hmm_pgas_iteration(hmm_kernel, path, algo.n, chain)
            elif lg_kernel is not None:
                path = compiled.lg_pgas_iteration(lg_kernel, path, algo.n, chain)
            else:
                path = pgas_iteration(prob.model, path, algo.n, chain).states
            out[ell] = f.along_path(np.asarray(path, dtype=float).reshape(len(path), -1))
        return out
    if fast and prob.kind == "lgssm":
        kernel = compiled.LinearGaussianKernel(prob.model)
        _, per_iter, _ = compiled.lg_ppg_run(kernel, path, algo.n, algo.m, k, 0, sampler_config(cfg), chain)
        dx, dy = prob.model.state_dim, prob.model.params.dy
        return np.array([compiled.lag_one_from_stats(row, dx, dy) for row in per_iter])
    if fast:
        kernel = compiled.DiscreteKernel(prob.hmm)
        for ell in range(k):
            out[ell, 0], path = compiled.hmm_ppg_iteration(kernel, path, algo.n, algo.m, chain)
        return out
    rcfg = RolloutConfig(algo.n, algo.m, k, 0)
    _, per_iter, _ = ppg_run(prob.model, path, rcfg, f, sampler_config(cfg), chain)
    return per_iter


def replicate_estimate(cfg, prob, algo: AlgoSpec, stream) -> np.ndarray:
    """One replicate of one experiment cell."""
    fast = _compiled_route(cfg, prob)
    if algo.algorithm == "paris":
        if fast and prob.kind == "lgssm":
            kernel = compiled.LinearGaussianKernel(prob.model)
            stats = compiled.lg_paris_run(kernel, prob.horizon, algo.n, algo.m, sampler_config(cfg), stream)
            return compiled.lag_one_from_stats(stats, prob.model.state_dim, prob.model.params.dy)
        if fast:
            kernel = compiled.DiscreteKernel(prob.hmm)
            stats, _, _ = compiled.hmm_sweep(kernel, prob.horizon, algo.n, algo.m, stream)
            return np.array([stats.mean()])
        est, _, _ = paris_run(prob.model, prob.horizon, algo.n, algo.m, prob.functional, sampler_config(cfg), stream)
        return est
    if algo.algorithm == "ffbsm":
        return ffbsm_run(prob.model, prob.horizon, algo.n, prob.functional, stream)[0]
    per_iter = chain_estimates(cfg, prob, algo, stream)
    return per_iter[algo.k0 :].mean(axis=0)


def _smooth_task(task):
    cfg, ci, algo, r = task
    prob = build_problem(cfg)
    stream = RngStream(cfg.seed).child(ci, r)
    t0 = time.perf_counter()
    try:
        est, failure = replicate_estimate(cfg, prob, algo, stream), ""
    except SmcError as exc:
        est, failure = np.full(prob.dim, np.nan), type(exc).__name__
    return est, failure, 1e3 * (time.perf_counter() - t0)


def pool_size(n_tasks) -> int:
    """Worker count: the CPU count, capped by ``SMC_THREADS``."""
    cap = os.environ.get("SMC_THREADS")
    workers = os.cpu_count() or 1
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"SMC_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(workers, n_tasks))


def map_tasks(fn, tasks):
    """Run tasks in a process pool; results come back in task order."""
    workers = pool_size(len(tasks))
    if workers == 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))


# --------------------------------------------------------------- summaries


def mean_ci(values, level=0.95):
    """Mean, standard error and normal-theory CI of the finite entries."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan, math.nan, (math.nan, math.nan)
    mean = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
    z = sps.norm.ppf(0.5 + level / 2)
    return mean, se, (mean - z * se, mean + z * se)


def median_ci(values, level=0.95):
    """Median with a distribution-free order-statistic CI."""
    v = np.sort(np.asarray(values, dtype=float)[np.isfinite(values)])
    n = v.size
    if n == 0:
        return math.nan, (math.nan, math.nan)
    lo = int(sps.binom.ppf((1 - level) / 2, n, 0.5))
    hi = int(sps.binom.ppf(1 - (1 - level) / 2, n, 0.5))
    lo, hi = max(lo - 1, 0), min(hi, n - 1)
    return float(np.median(v)), (float(v[lo]), float(v[hi]))


@dataclass
class CommandResult:
    paths: list
    failures: int
    total: int
    summary: list
    records: list = field(default_factory=list)

    @property
    def all_failed(self) -> bool:
        return self.total > 0 and self.failures == self.total


def _stem(path, suffix):
    p = Path(path)
    return p.with_name(p.stem + suffix + (p.suffix or ".csv"))


def cmd_smooth(cfg: ExperimentConfig) -> CommandResult:
    prob = build_problem(cfg)
    specs = smooth_specs(cfg)
    reps = cfg.run["replicates"]
    tasks = [(cfg, ci, algo, r) for ci, algo in enumerate(specs) for r in range(reps)]
    results = map_tasks(_smooth_task, tasks)
    d = prob.dim
    timing = cfg.run["timing"]
    header = ["config", "algorithm", "n", "m", "k", "k0", "replicate", "seed"]
    header += [f"estimate_{i}" for i in range(d)] + [f"reference_{i}" for i in range(d)]
    header += [f"error_{i}" for i in range(d)] + (["wall_ms"] if timing else []) + ["failed", "failure"]
    rows, summary = [], []
    for (_, ci, algo, r), (est, failure, ms) in zip(tasks, results):
        row = [ci, algo.algorithm, algo.n, algo.m, algo.k, algo.k0, r, cfg.seed]
        row += list(est) + list(prob.reference) + list(est - prob.reference)
        rows.append(row + ([ms] if timing else []) + [bool(failure), failure])
    note = "zero functional: bias equals minus the reference" if cfg.run["functional"] == "zero" else ""
    s_header = ["config", "algorithm", "n", "m", "k", "k0", "budget", "replicates", "failures"]
    for i in range(d):
        s_header += [f"mean_{i}", f"se_{i}", f"reference_{i}", f"bias_{i}", f"bias_ci_low_{i}", f"bias_ci_high_{i}"]
    s_header.append("note")
    failures = 0
    for ci, algo in enumerate(specs):
        chunk = [res for (_, c, _, _), res in zip(tasks, results) if c == ci]
        est = np.array([e for e, _, _ in chunk])
        n_fail = sum(bool(f) for _, f, _ in chunk)
        failures += n_fail
        srow = [ci, algo.algorithm, algo.n, algo.m, algo.k, algo.k0, algo.budget, reps, n_fail]
        for i in range(d):
            mean, se, _ = mean_ci(est[:, i])
            _, _, (lo, hi) = mean_ci(est[:, i] - prob.reference[i])
            srow += [mean, se, prob.reference[i], mean - prob.reference[i], lo, hi]
        summary.append(srow + [note])
    out = cfg.run["output"]
    write_table(out, header, rows, cfg)
    write_table(_stem(out, ".summary"), s_header, summary, cfg)
    return CommandResult([out, _stem(out, ".summary")], failures, len(tasks), summary)


def _chain_task(task):
    cfg, r, algo, k_max = task
    prob = build_problem(cfg)
    stream = RngStream(cfg.seed).child("bias_k0", r)
    try:
        return chain_estimates(cfg, prob, algo, stream, k_max), ""
    except SmcError as exc:
        return np.full((k_max, prob.dim), np.nan), type(exc).__name__


def decay_check(ells, abs_bias, se):
    """True when |bias| never rises by more than one SE of the difference."""
    ok = True
    for a in range(len(ells) - 1):
        slack = math.hypot(se[a], se[a + 1])
        ok &= bool(abs_bias[a + 1] <= abs_bias[a] + slack)
    return ok


def _cell(per_iter, ok, k, k0, reference):
    est = per_iter[ok, k0:k].mean(axis=1)
    stats = [mean_ci(est[:, i]) for i in range(est.shape[1])]
    mean = np.array([s[0] for s in stats])
    se = np.array([s[1] for s in stats])
    bias = mean - reference
    return mean, bias, se, float(np.linalg.norm(bias)), float(np.linalg.norm(se))


def cmd_bias_k0(cfg: ExperimentConfig) -> CommandResult:
    prob = build_problem(cfg)
    b = cfg["bias_k0"]
    k_max = max(b["k_grid"] + b["decay_grid"])
    algo = AlgoSpec("ppg", b["n"], cfg.run["m"], k_max, 0)
    reps = cfg.run["replicates"]
    tasks = [(cfg, r, algo, k_max) for r in range(reps)]
    results = map_tasks(_chain_task, tasks)
    per_iter = np.stack([p for p, _ in results])
    failed = np.array([bool(f) for _, f in results])
    ok = ~failed
    d = prob.dim
    raw_header = ["replicate", "iteration"] + [f"estimate_{i}" for i in range(d)] + ["failed", "failure"]
    raw = [
        [r, ell + 1] + list(per_iter[r, ell]) + [failed[r], results[r][1]]
        for r in range(reps)
        for ell in range(k_max)
    ]
    header = ["n", "k", "k0", "rule", "replicates", "failures"]
    header += [f"mean_{i}" for i in range(d)] + [f"bias_{i}" for i in range(d)]
    header += [f"se_{i}" for i in range(d)] + ["abs_bias", "abs_bias_se"]
    rows = []
    cells = [(k, k - 1 if rule == "last" else k // 2, rule) for k in b["k_grid"] for rule in b["k0_rule"]]
    cells += [(ell, ell - 1, "single") for ell in b["decay_grid"]]
    decay = []
    for k, k0, rule in cells:
        mean, bias, se, ab, abse = _cell(per_iter, ok, k, k0, prob.reference)
        rows.append([algo.n, k, k0, rule, reps, int(failed.sum())] + list(mean) + list(bias) + list(se) + [ab, abse])
        if rule == "single":
            decay.append((k, ab, abse))
    passed = decay_check([e for e, _, _ in decay], [a for _, a, _ in decay], [s for _, _, s in decay])
    check = [["decay", " ".join(str(e) for e, _, _ in decay),
              " ".join(f"{a:.6g}" for _, a, _ in decay), " ".join(f"{s:.6g}" for _, _, s in decay), passed]]
    out = cfg.run["output"]
    write_table(out, header, rows, cfg)
    write_table(_stem(out, ".raw"), raw_header, raw, cfg)
    write_table(_stem(out, ".summary"), ["check", "iterations", "abs_bias", "se", "passed"], check, cfg)
    return CommandResult([out, _stem(out, ".raw"), _stem(out, ".summary")], int(failed.sum()), reps, check)


def learning_family(cfg, prob):
    if prob.kind == "lgssm":
        return LgssmFamily(prob.params, prob.observations)
    if prob.kind == "crnn":
        return CrnnFamily(prob.params, prob.observations)
    raise ConfigError("learning covers the LGSSM and CRNN models")


def learning_config(cfg) -> LearningConfig:
    lr = cfg["learn"]
    return LearningConfig(
        iterations=lr["iterations"], n=lr["n"], k=lr["k"], k0=lr["k0"], m=lr["m"],
        sampler=sampler_config(cfg), engine=cfg.run["engine"],
    )


_MLES = {}


def _exact_mle(family):
    key = (family.base.theta().tobytes(), family.observations.tobytes())
    if key not in _MLES:
        _MLES[key] = family.exact_mle()
    return _MLES[key]


def _learn_task(task):
    cfg, seed_id, method = task
    prob = build_problem(cfg)
    family = learning_family(cfg, prob)
    lr = cfg["learn"]
    mle = _exact_mle(family) if prob.kind == "lgssm" else None
    root = RngStream(cfg.seed).child("learn", seed_id)
    theta0 = sample_theta0(family.dim, root.child("theta0"), lr["theta0_scale"])
    opt = AdamState.fresh(family.dim, lr=lr["lr"])
    fn = score_ascent_ppg if method == "ppg" else score_ascent_pg
    try:
        run = fn(family, theta0, learning_config(cfg), root.child(method), opt=opt, mle=mle)
    except SmcError as exc:
        return None, type(exc).__name__, math.nan
    if mle is not None:
        metric = float(run.d_mle[-1])
    else:
        model = family.model(run.final_theta)
        metric = -pf_loglik(model, family.horizon - 1, lr["nll_particles"], root.child("nll"))
    return run, "", metric


def cmd_learn(cfg: ExperimentConfig) -> CommandResult:
    prob = build_problem(cfg)
    learning_family(cfg, prob)  # fail early on unsupported models
    lr = cfg["learn"]
    metric = "d_mle" if prob.kind == "lgssm" else "nll"
    tasks = [(cfg, s, mth) for s in range(lr["seeds"]) for mth in lr["methods"]]
    results = map_tasks(_learn_task, tasks)
    run_dir = Path(lr["output_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for (_, s, mth), (run, failure, value) in zip(tasks, results):
        if run is not None:
            run.write_csv(run_dir / f"{mth}_seed{s}.csv", timing=cfg.run["timing"])
            run.write_snapshot(run_dir / f"{mth}_seed{s}.json")
        rows.append([mth, s, value, bool(failure), failure])
    out = cfg.run["output"]
    write_table(out, ["method", "seed", f"final_{metric}", "failed", "failure"], rows, cfg)
    summary = []
    finals = {}
    for mth in lr["methods"]:
        vals = np.array([v for (_, _, m_), (_, _, v) in zip(tasks, results) if m_ == mth])
        finals[mth] = vals
        med, (lo, hi) = median_ci(vals)
        summary.append([mth, len(vals), int(np.sum(~np.isfinite(vals))), med, lo, hi])
    write_table(_stem(out, ".summary"), ["method", "runs", "failures", "median", "ci_low", "ci_high"], summary, cfg)
    paths = [out, _stem(out, ".summary")]
    if "ppg" in finals and "pgas" in finals:
        wins, pairs, p = sign_test(finals["ppg"], finals["pgas"])
        comp = [[wins, pairs, p, np.median(finals["ppg"]), np.median(finals["pgas"]),
                 bool(np.median(finals["ppg"]) <= np.median(finals["pgas"]))]]
        write_table(_stem(out, ".comparison"),
                    ["ppg_wins", "pairs", "p_value", "median_ppg", "median_pgas", "ppg_not_worse"], comp, cfg)
        paths.append(_stem(out, ".comparison"))
    failures = sum(bool(f) for _, f, _ in results)
    return CommandResult(paths, failures, len(tasks), summary, rows)


def sign_test(a, b):
    """One-sided sign test that ``a < b`` in paired samples (ties dropped)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    keep = np.isfinite(a) & np.isfinite(b) & (a != b)
    wins = int(np.sum(a[keep] < b[keep]))
    pairs = int(keep.sum())
    p = sps.binomtest(wins, pairs, 0.5, alternative="greater").pvalue if pairs else 1.0
    return wins, pairs, float(p)


def cmd_diag(cfg: ExperimentConfig) -> CommandResult:
    d = cfg["diag"]
    t = d["t"]
    try:
        if d["rho"] is not None:
            rho = d["rho"]
        elif d["g_bounds"] is not None and d["m_bounds"] is not None:
            rho = rho_bound(d["g_bounds"], d["m_bounds"], t)
        else:
            raise ConfigError("diag needs rho or both g_bounds and m_bounds")
        n_t = particle_threshold(rho, t)
        rows = []
        for n in d["n_grid"]:
            diag = mixing_diagnostics(rho, n, t)
            rows.append([rho, t, n_t, diag.n_min, n, diag.kappa, diag.below_threshold])
    except NonpositiveBoundError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out = cfg.run["output"]
    write_table(out, ["rho", "t", "n_threshold", "n_min", "n", "kappa", "below_threshold"], rows, cfg)
    return CommandResult([out], 0, len(rows), rows)


def cmd_simulate(cfg: ExperimentConfig) -> CommandResult:
    x, y = simulate_dataset(cfg)
    out = cfg.run["output"]
    write_table(out, [f"y_{i + 1}" for i in range(y.shape[1])], y.tolist(), cfg)
    write_table(_stem(out, ".states"), [f"x_{i + 1}" for i in range(x.shape[1])], x.tolist(), cfg)
    return CommandResult([out, _stem(out, ".states")], 0, len(y), [])


COMMANDS = {
    "smooth": cmd_smooth,
    "bias-k0": cmd_bias_k0,
    "learn": cmd_learn,
    "diag": cmd_diag,
    "simulate": cmd_simulate,
}
