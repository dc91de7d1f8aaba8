"""Sparse dynamic factor models by variational inference with loading
selection priors, missing-data support, an EM maximum-likelihood baseline
and a Monte Carlo study harness."""

from .core import (
    InvalidModelError,
    ModelDims,
    NumericalError,
    Panel,
    PriorSpec,
    SmoothedMoments,
    VariationalState,
    validate,
)
from .elbo import ElboBreakdown, compute_elbo
from .em import EmConfig, EmParams, EmReport, run_em
from .evaluate import Alignment, align, evaluate_fit, factor_precision, inclusion_accuracy, loading_rmse
from .fit import FitConfig, FitReport, fit, initialize, run_vi, run_with_reruns
from .simulate import SimConfig, SimTruth, apply_missing_pattern, simulate_dfm
from .study import StudyCell, StudyConfig, experiment2_config, run_study

__all__ = [
    "Alignment", "ElboBreakdown", "EmConfig", "EmParams", "EmReport",
    "FitConfig", "FitReport", "InvalidModelError", "ModelDims",
    "NumericalError", "Panel", "PriorSpec", "SimConfig", "SimTruth",
    "SmoothedMoments", "StudyCell", "StudyConfig", "VariationalState",
    "align", "apply_missing_pattern", "compute_elbo", "evaluate_fit",
    "experiment2_config", "factor_precision", "fit", "inclusion_accuracy",
    "initialize", "loading_rmse", "run_em", "run_study", "run_vi",
    "run_with_reruns", "simulate_dfm", "validate",
]
