"""Autofocused model-based optimization.

Estimation-of-distribution search over a design space where the predictive
oracle is iteratively retrained on importance-reweighted training data, so it
stays accurate where the search distribution currently is.
"""

from .autofocus import (
    AutofocusConfig,
    WeightDiagnostics,
    autofocus_step,
    cbas_weight_variance,
    chebyshev_loss_bound,
    effective_sample_size,
    flatten_weights,
    importance_weights,
    renyi2_plugin,
    self_normalize,
)
from .core import (
    GaussianPrediction,
    LabeledDataset,
    RngStream,
    ThresholdConstraint,
    WeightVector,
    log_sum_exp,
    normal_survival,
    percentile,
    standardize_dataset,
)
from .eda import EdaConfig, Trajectory, oracle_training_stream, run_eda
from .evaluation import EvalReport, evaluate_run, naive_baseline_pci, spearman
from .oracles import (
    KernelRidgeOracle,
    MlpEnsembleOracle,
    MlpTrainingConfig,
    ensemble_predict,
    fit_krr_oracle,
    fit_krr_weighted,
    fit_mlp_ensemble_weighted,
    krr_noise_variance_iwcv,
)
from .search_models import (
    Grid1DModel,
    MultivariateGaussianModel,
    fit_mvn_weighted,
    grid1d_expectation,
    grid1d_from_unnormalized,
)

__version__ = "0.1.0"

__all__ = [
    "AutofocusConfig",
    "EdaConfig",
    "EvalReport",
    "GaussianPrediction",
    "Grid1DModel",
    "KernelRidgeOracle",
    "LabeledDataset",
    "MlpEnsembleOracle",
    "MlpTrainingConfig",
    "MultivariateGaussianModel",
    "RngStream",
    "ThresholdConstraint",
    "Trajectory",
    "WeightDiagnostics",
    "WeightVector",
    "autofocus_step",
    "cbas_weight_variance",
    "chebyshev_loss_bound",
    "effective_sample_size",
    "ensemble_predict",
    "evaluate_run",
    "fit_krr_oracle",
    "fit_krr_weighted",
    "fit_mlp_ensemble_weighted",
    "fit_mvn_weighted",
    "flatten_weights",
    "grid1d_expectation",
    "grid1d_from_unnormalized",
    "importance_weights",
    "krr_noise_variance_iwcv",
    "log_sum_exp",
    "naive_baseline_pci",
    "normal_survival",
    "oracle_training_stream",
    "percentile",
    "renyi2_plugin",
    "run_eda",
    "self_normalize",
    "spearman",
    "standardize_dataset",
]
