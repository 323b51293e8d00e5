"""Federated causal inference from per-site summary statistics."""
from fedcausal.aipw import (
    AipwResult,
    NuisanceModels,
    Provenance,
    aipw_score,
    estimate_aipw,
    glm_nuisances,
)
from fedcausal.data import Dataset, outcome_design, propensity_design
from fedcausal.federation import (
    AipwSummary,
    FederatedEstimate,
    PropensityMode,
    SiteSummary,
    federated_aipw,
    federated_ipw_mle,
    federated_mle,
    federated_mle_from_data,
)
from fedcausal.glm import Family, FitResult, fit_mle, hessian, log_likelihood, robust_variance, score
from fedcausal.ipw_mle import (
    IpwMleFit,
    MatrixBundle,
    estimate_bundle,
    fit_ipw_mle,
    ipw_mle_variance,
    treatment_effect_from_ipw_mle,
)
from fedcausal.kernels import BACKEND
from fedcausal.propensity import (
    Estimand,
    OverlapReport,
    PropensityFit,
    check_overlap,
    fit_propensity,
    ipw_weights,
    known_propensity,
)
from fedcausal.diagnostics import StabilityTestResult, hotelling_stability_test, suggest_partition
from fedcausal.protocol import SessionConfig, run_session
from fedcausal.weighting import (
    GlobalLayout,
    Mode,
    Scheme,
    gather,
    hessian_weighting,
    inverse_variance_weighting,
    sample_size_weighting,
    zero_pad,
)

__version__ = "0.1.0"

__all__ = [
    "aipw_score",
    "AipwResult",
    "AipwSummary",
    "BACKEND",
    "check_overlap",
    "Dataset",
    "Estimand",
    "estimate_aipw",
    "estimate_bundle",
    "Family",
    "federated_aipw",
    "federated_ipw_mle",
    "federated_mle",
    "federated_mle_from_data",
    "FederatedEstimate",
    "fit_ipw_mle",
    "fit_mle",
    "fit_propensity",
    "FitResult",
    "gather",
    "glm_nuisances",
    "GlobalLayout",
    "hessian",
    "hessian_weighting",
    "hotelling_stability_test",
    "inverse_variance_weighting",
    "ipw_mle_variance",
    "ipw_weights",
    "IpwMleFit",
    "known_propensity",
    "log_likelihood",
    "MatrixBundle",
    "Mode",
    "NuisanceModels",
    "outcome_design",
    "OverlapReport",
    "propensity_design",
    "PropensityFit",
    "PropensityMode",
    "Provenance",
    "robust_variance",
    "run_session",
    "sample_size_weighting",
    "Scheme",
    "score",
    "SessionConfig",
    "SiteSummary",
    "StabilityTestResult",
    "suggest_partition",
    "treatment_effect_from_ipw_mle",
    "zero_pad",
]
