from .crnn import CrnnModel, CrnnParams, crnn_model, crnn_simulate, student_t_logpdf
from .discrete import (
    DiscreteHmm,
    DiscreteHmmModel,
    discrete_fb_smooth,
    discrete_model,
    sample_smoothing_path,
)
from .lgssm import (
    LgssmModel,
    LgssmParams,
    SmoothedMoments,
    disturbance_smooth,
    kalman_filter,
    lag_one_reference,
    lgssm_exact_mle,
    lgssm_exact_score,
    lgssm_loglik,
    lgssm_model,
    lgssm_simulate,
    benchmark_scalar_params,
    singular_value_distance,
)
