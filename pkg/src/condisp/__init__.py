"""Minimum conditional disparity estimation for conditionally specified models.

Kernel conditional density estimates with mixed continuous and discrete
covariates are compared with a parametric conditional family through the
Hellinger (HD) or negative exponential (NED) disparity; the parameter that
minimises the disparity is a robust and efficient estimator.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .bandwidth import default_grid, select_bandwidths
from .bootstrap import BootstrapResult, assemble, bootstrap, bootstrap_baseline, bootstrap_mde
from .core import CovariatePartition, Dataset, RngStream, Variant, validate
from .disparity import (
    HD,
    NED,
    DisparityObjective,
    DisparitySpec,
    c_function,
    pointwise_disparity,
    residual_adjustment,
    total_disparity,
)
from .estimators import EstimatorTag, FitResult, fit_estimator, fit_huber, fit_marginal, fit_mde, fit_mle
from .kernels import BandwidthSet, DensityEstimate, fit_density
from .models import ModelSpec, fisher_information, mle_fit
from .simulation import ContaminationScheme, StudyConfig, run_study

__all__ = [
    "__version__",
    "BandwidthSet",
    "BootstrapResult",
    "ContaminationScheme",
    "CovariatePartition",
    "Dataset",
    "DensityEstimate",
    "DisparityObjective",
    "DisparitySpec",
    "EstimatorTag",
    "FitResult",
    "HD",
    "ModelSpec",
    "NED",
    "RngStream",
    "StudyConfig",
    "Variant",
    "assemble",
    "bootstrap",
    "bootstrap_baseline",
    "bootstrap_mde",
    "c_function",
    "default_grid",
    "fisher_information",
    "fit_density",
    "fit_estimator",
    "fit_huber",
    "fit_marginal",
    "fit_mde",
    "fit_mle",
    "mle_fit",
    "pointwise_disparity",
    "residual_adjustment",
    "run_study",
    "select_bandwidths",
    "total_disparity",
    "validate",
]
