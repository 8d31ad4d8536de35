"""Nonparametric difference-in-differences estimation under conditional parallel trends."""

from .balancing import (
    BalancingWeights,
    QPProblem,
    amle_estimate,
    build_qp,
    estimate_sigma2,
    solve_qp,
)
from .config import EstimationConfig
from .data import (
    Dataset,
    EstimateReport,
    FoldAssignment,
    Method,
    load_csv,
    make_folds,
    save_csv,
)
from .estimators import (
    aipw_estimate,
    hte_fit,
    ipw_estimate,
    ols_baseline,
    sample_means,
    tr_estimate,
    weighted_target,
)
from .hermite import HermiteBasis, Standardizer, basis_matrix, build_basis, features
from .nuisance import (
    CrossFittedNuisances,
    PropensityModel,
    RidgeModel,
    crossfit_nuisances,
    fit_marginal_effect,
    fit_propensity,
    fit_ridge,
)
from .orthogonal import abc, h_residual, verify_decomposition
from .simulation import (
    SETUPS,
    GroundTruth,
    MetricsTable,
    SetupSpec,
    estimate_all,
    gen_setup,
    oracle_tr_estimate,
    run_trials,
)

__version__ = "0.1.0"

__all__ = [
    "BalancingWeights",
    "CrossFittedNuisances",
    "Dataset",
    "EstimateReport",
    "EstimationConfig",
    "FoldAssignment",
    "GroundTruth",
    "HermiteBasis",
    "Method",
    "MetricsTable",
    "PropensityModel",
    "QPProblem",
    "RidgeModel",
    "SETUPS",
    "SetupSpec",
    "Standardizer",
    "abc",
    "aipw_estimate",
    "amle_estimate",
    "basis_matrix",
    "build_basis",
    "build_qp",
    "crossfit_nuisances",
    "estimate_all",
    "estimate_sigma2",
    "features",
    "fit_marginal_effect",
    "fit_propensity",
    "fit_ridge",
    "gen_setup",
    "h_residual",
    "hte_fit",
    "ipw_estimate",
    "load_csv",
    "make_folds",
    "ols_baseline",
    "oracle_tr_estimate",
    "run_trials",
    "sample_means",
    "save_csv",
    "solve_qp",
    "tr_estimate",
    "verify_decomposition",
    "weighted_target",
]
