"""Multi-view anomaly detection with a Dirichlet-process latent variable model.

Instances whose views are mutually consistent are explained by a single latent
vector; inconsistent instances need several. The fraction of Gibbs sweeps in
which an instance uses more than one latent vector is its anomaly score.
"""

from .bench import (
    ExperimentSpec,
    MetricsReport,
    auc,
    gen_single_view_anomalies,
    gen_synthetic_cca,
    inject_swap_anomalies,
    parse_libsvm,
    run_experiment,
    split_views,
)
from .imputation import (
    DimSelection,
    ImputationResult,
    impute,
    mean_impute,
    sample_holdout,
    select_latent_dim,
)
from .inference import (
    AnomalyScores,
    GibbsTrace,
    InferenceConfig,
    anomaly_scores,
    gibbs_sweep,
    mstep_gradient,
    mstep_optimize,
    pcca_baseline_scores,
    resample_assignment,
    run_stochastic_em,
)
from .model import (
    AssignmentState,
    Hyperparameters,
    LatentStats,
    MultiViewDataset,
    ProjectionSet,
    alpha_posterior,
    compute_latent_stats,
    joint_log_likelihood,
    latent_posterior,
    marginal_log_likelihood,
    partition_log_prior,
)

__version__ = "0.1.0"

__all__ = [
    "AnomalyScores",
    "AssignmentState",
    "DimSelection",
    "ExperimentSpec",
    "GibbsTrace",
    "Hyperparameters",
    "ImputationResult",
    "InferenceConfig",
    "LatentStats",
    "MetricsReport",
    "MultiViewDataset",
    "ProjectionSet",
    "alpha_posterior",
    "anomaly_scores",
    "auc",
    "compute_latent_stats",
    "gen_single_view_anomalies",
    "gen_synthetic_cca",
    "gibbs_sweep",
    "impute",
    "inject_swap_anomalies",
    "joint_log_likelihood",
    "latent_posterior",
    "marginal_log_likelihood",
    "mean_impute",
    "mstep_gradient",
    "mstep_optimize",
    "parse_libsvm",
    "partition_log_prior",
    "pcca_baseline_scores",
    "resample_assignment",
    "run_experiment",
    "run_stochastic_em",
    "sample_holdout",
    "select_latent_dim",
    "split_views",
]
