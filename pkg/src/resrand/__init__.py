"""Residual randomization inference for linear regression."""

from __future__ import annotations

__version__ = "0.1.0"

from .engine import (
    ConfidenceInterval,
    Decision,
    TestConfig,
    TestOutcome,
    decide_with_correction,
    invert_ci,
    pvalue_one_sided,
    pvalue_two_sided,
    randomization_test,
    run_test,
    similarity_diagnostic,
)
from .errors import InputError, NotSimilarWarning, NumericalError, ResRandError
from .exactcons import BalancedDesignSpec, build_balanced_clustering, run_exact_test, verify_cluster_similarity
from .highdim import PenaltyConfig, default_penalties, family_test, fit_lasso, fit_ridge, run_highdim_test
from .linmodel import Dataset, LinearHypothesis, classical_wald_test, fit_constrained_ols, fit_ols, test_statistic
from .primitives import (
    ClusterPerm,
    ClusterSign,
    Clustering,
    Double,
    GlobalPerm,
    GlobalSign,
    GroupElement,
    TwoWayLayout,
    TwoWayPerm,
    group_size,
    layout_from_labels,
)
from .reflect import ReflectionConfig, Undecided, run_reflection_test
from .simlab import SCENARIOS, generate, run_monte_carlo

__all__ = [
    "__version__",
    "BalancedDesignSpec",
    "build_balanced_clustering",
    "classical_wald_test",
    "Clustering",
    "ClusterPerm",
    "ClusterSign",
    "ConfidenceInterval",
    "Dataset",
    "decide_with_correction",
    "Decision",
    "default_penalties",
    "Double",
    "family_test",
    "fit_constrained_ols",
    "fit_lasso",
    "fit_ols",
    "fit_ridge",
    "generate",
    "GlobalPerm",
    "GlobalSign",
    "group_size",
    "GroupElement",
    "InputError",
    "invert_ci",
    "layout_from_labels",
    "LinearHypothesis",
    "NotSimilarWarning",
    "NumericalError",
    "PenaltyConfig",
    "pvalue_one_sided",
    "pvalue_two_sided",
    "randomization_test",
    "ReflectionConfig",
    "ResRandError",
    "run_exact_test",
    "run_highdim_test",
    "run_monte_carlo",
    "run_reflection_test",
    "run_test",
    "SCENARIOS",
    "similarity_diagnostic",
    "test_statistic",
    "TestConfig",
    "TestOutcome",
    "TwoWayLayout",
    "TwoWayPerm",
    "Undecided",
    "verify_cluster_similarity",
]
