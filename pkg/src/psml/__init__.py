"""Penalized simulated maximum likelihood for partially observed SDEs."""

from .core import (
    Dataset,
    DomainError,
    GaussianSpec,
    NumericalError,
    SdeModel,
    TimeGrid,
    derive_seed,
    euler_step,
    euler_transition,
    load_dataset,
    matrix_sqrt,
    mvn_logpdf,
    rng_stream,
    save_dataset,
    simulate_dataset,
    simulate_path,
)
from .likelihood import (
    ParticleCloud,
    PenaltyConfig,
    TransitionFailure,
    effective_sample_size,
    log_likelihood,
    penalized_log_likelihood,
    weight_cv,
)
from .models import (
    CwdDirectModel,
    Lorenz63Model,
    MODEL_NAMES,
    OuModel,
    StepFunction,
    cwd_sigma,
    make_model,
    ou_exact_mle,
    r0_estimate,
)
from .optimize import (
    EstimationError,
    OptimizerConfig,
    PsmlFit,
    maximize_psml,
    nelder_mead,
    transform,
    untransform,
)
from .samplers import SamplerSpec, importance_weight, propose_transition
from .study import (
    EpisodeSpec,
    MethodSpec,
    STUDY_PRESETS,
    StudyConfig,
    run_study,
)
from .tune import (
    TUNE_PRESETS,
    BootstrapResult,
    TuneConfig,
    TuneResult,
    parametric_bootstrap,
    prediction_error,
    tune_lambda,
)

__version__ = "0.1.0"

__all__ = [
    "BootstrapResult",
    "CwdDirectModel",
    "Dataset",
    "DomainError",
    "EpisodeSpec",
    "EstimationError",
    "GaussianSpec",
    "Lorenz63Model",
    "MODEL_NAMES",
    "MethodSpec",
    "NumericalError",
    "OptimizerConfig",
    "OuModel",
    "ParticleCloud",
    "PenaltyConfig",
    "PsmlFit",
    "STUDY_PRESETS",
    "SamplerSpec",
    "SdeModel",
    "StepFunction",
    "StudyConfig",
    "TUNE_PRESETS",
    "TimeGrid",
    "TransitionFailure",
    "TuneConfig",
    "TuneResult",
    "cwd_sigma",
    "derive_seed",
    "effective_sample_size",
    "euler_step",
    "euler_transition",
    "importance_weight",
    "load_dataset",
    "log_likelihood",
    "make_model",
    "matrix_sqrt",
    "maximize_psml",
    "mvn_logpdf",
    "nelder_mead",
    "ou_exact_mle",
    "parametric_bootstrap",
    "penalized_log_likelihood",
    "prediction_error",
    "propose_transition",
    "r0_estimate",
    "rng_stream",
    "run_study",
    "save_dataset",
    "simulate_dataset",
    "simulate_path",
    "transform",
    "tune_lambda",
    "untransform",
    "weight_cv",
]
