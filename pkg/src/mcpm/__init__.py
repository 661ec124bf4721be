"""Multi-task Cox process mixtures on count grids.

Latent intensity surfaces are shared across tasks through stochastic
mixing weights; inference is sparse variational with a closed-form
expected likelihood. Double precision is mandatory for the linear
algebra involved, so importing this package switches jax to x64.
"""

from jax import config as _jax_config

_jax_config.update("jax_enable_x64", True)

__version__ = "0.1.0"

from .exceptions import (  # noqa: E402
    FactorizationError,
    McpmError,
    MgfDomainError,
    TrainingFailureError,
)
from .kernels import (  # noqa: E402
    GramMatrix,
    KernelFamily,
    KernelSpec,
    chol_jitter,
    gram,
    kernel_eval,
)
from .data import (  # noqa: E402
    CountGrid,
    EventDataset,
    FoldSpec,
    GridSpec,
    SyntheticCounts,
    apply_fold,
    discretize,
    generate_line,
    generate_s1,
    load_counts_csv,
    load_events_csv,
    load_fold_json,
    load_truth_csv,
    make_folds,
    write_counts_csv,
    write_events_csv,
    write_fold_json,
    write_truth_csv,
)
from .model import (  # noqa: E402
    BaselineMode,
    CoupledWeights,
    GaussianMoments,
    IndependentWeights,
    ModelConfig,
    PriorSample,
    VariationalState,
    config_from_dict,
    config_to_dict,
    init_state,
    latent_marginals,
    load_checkpoint,
    prior_log_intensity_cov,
    sample_prior_counts,
    sample_prior_log_intensities,
    save_checkpoint,
)
from .elbo import (  # noqa: E402
    MGF_DOMAIN_EPS,
    Minibatch,
    batch_from_grid,
    elbo,
    elbo_parts,
    ell_closed_form,
    ell_monte_carlo,
    kl_u,
    kl_w,
    mgf_log_intensity,
    pool_cells,
)
from .trainer import TrainConfig, TrainTrace, fit, grad_elbo  # noqa: E402
from .predict import (  # noqa: E402
    IntensityPrediction,
    conditional_probability_surface,
    intensity_mean_var,
    intensity_moment,
    predictive_count_samples,
    sample_intensities,
    write_surface_csv,
)
from .metrics import empirical_coverage, evaluation_report, nlpl, rmse  # noqa: E402

__all__ = [
    "__version__",
    "McpmError",
    "MgfDomainError",
    "FactorizationError",
    "TrainingFailureError",
    "KernelFamily",
    "KernelSpec",
    "GramMatrix",
    "kernel_eval",
    "gram",
    "chol_jitter",
    "GridSpec",
    "EventDataset",
    "CountGrid",
    "FoldSpec",
    "SyntheticCounts",
    "discretize",
    "make_folds",
    "apply_fold",
    "generate_s1",
    "generate_line",
    "write_events_csv",
    "load_events_csv",
    "write_counts_csv",
    "load_counts_csv",
    "write_truth_csv",
    "load_truth_csv",
    "write_fold_json",
    "load_fold_json",
    "ModelConfig",
    "BaselineMode",
    "IndependentWeights",
    "CoupledWeights",
    "GaussianMoments",
    "VariationalState",
    "PriorSample",
    "init_state",
    "latent_marginals",
    "prior_log_intensity_cov",
    "sample_prior_log_intensities",
    "sample_prior_counts",
    "config_to_dict",
    "config_from_dict",
    "save_checkpoint",
    "load_checkpoint",
    "Minibatch",
    "batch_from_grid",
    "pool_cells",
    "MGF_DOMAIN_EPS",
    "mgf_log_intensity",
    "kl_u",
    "kl_w",
    "ell_closed_form",
    "ell_monte_carlo",
    "elbo",
    "elbo_parts",
    "TrainConfig",
    "TrainTrace",
    "grad_elbo",
    "fit",
    "IntensityPrediction",
    "intensity_moment",
    "intensity_mean_var",
    "sample_intensities",
    "predictive_count_samples",
    "conditional_probability_surface",
    "write_surface_csv",
    "empirical_coverage",
    "evaluation_report",
    "nlpl",
    "rmse",
]
