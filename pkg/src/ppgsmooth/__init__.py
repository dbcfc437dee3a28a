"""Particle smoothing with PaRIS, PaRIS particle Gibbs and score ascent."""

from .alias import AliasTable, alias_draw, build_alias
from .core import (
    ParticleCloud,
    StateSpaceModel,
    genealogy_update,
    pf_init,
    pf_loglik,
    pf_step,
    run_filter,
    trace_lineage,
)
from .errors import *  # noqa: F401,F403
from .ppg import (
    FrozenPath,
    MixingDiagnostics,
    PpgIterate,
    RolloutConfig,
    backward_initial_path,
    cond_paris_update,
    cpf_init,
    cpf_step,
    kappa_rate,
    lineage_initial_path,
    mixing_diagnostics,
    pgas_iteration,
    ppg_iteration,
    ppg_run,
    rho_bound,
    rollout_estimate,
)
from .learning import (
    AdamState,
    CrnnFamily,
    LearningConfig,
    LearningRun,
    LgssmFamily,
    adam_step,
    fisher_functional,
    gd_est,
    sample_theta0,
    score_ascent_pg,
    score_ascent_ppg,
)
from .rng import RngStream, as_stream
from .smoothing import (
    EXACT,
    AdditiveFunctional,
    BackwardSamplerConfig,
    BackwardStats,
    SamplerKind,
    backward_draw,
    backward_row_probs,
    ffbsm_run,
    ffbsm_step,
    lag_one_product,
    paris_run,
    paris_step,
    zero_functional,
)

__version__ = "0.1.0"
