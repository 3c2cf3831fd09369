"""Penalized GEE for clustered binary outcomes.

Fits marginal logistic models by penalized (or plain) generalized
estimating equations, evaluates fourteen sandwich covariance estimators
with small-sample corrections, reports the leverage-overcorrection
diagnostic, generates correlated binary data, and runs Monte Carlo
scenario grids for type I error / power / SE-calibration studies.
"""

from .data import (
    Cluster,
    EstimatorId,
    LEVERAGE_IDS,
    LongitudinalDataset,
    POOLING_IDS,
    WorkingModel,
    read_csv,
    validate_dataset,
    write_csv,
)
from .core import (
    ClusterQuantities,
    FitKernel,
    assemble_kernel,
    cluster_quantities,
    firth_penalty,
    firth_penalty_fd,
    gee_score,
    working_correlation,
)
from .fitting import FitOptions, PgeeFit, estimate_alpha, estimate_phi, fit
from .variance import (
    OvercorrectionDiagnostic,
    VarianceEstimate,
    WaldResult,
    estimate_all,
    estimate_variance,
    leverage_scores,
    overcorrection_diagnostic,
    wald_test,
)
from .datagen import (
    Scenario,
    calibrate_intercept,
    clf_coefficients,
    clf_generate,
    clf_sample,
    generate_dataset,
)
from .harness import (
    EstimatorCell,
    ScenarioResult,
    ScenarioSpec,
    aggregate,
    parse_config,
    results_csv,
    run_grid,
    run_replication,
    run_scenario,
    summary_json,
)
from . import errors

__version__ = "0.1.0"

__all__ = [
    "Cluster",
    "ClusterQuantities",
    "EstimatorCell",
    "EstimatorId",
    "FitKernel",
    "FitOptions",
    "LEVERAGE_IDS",
    "LongitudinalDataset",
    "OvercorrectionDiagnostic",
    "POOLING_IDS",
    "PgeeFit",
    "Scenario",
    "ScenarioResult",
    "ScenarioSpec",
    "VarianceEstimate",
    "WaldResult",
    "WorkingModel",
    "aggregate",
    "assemble_kernel",
    "calibrate_intercept",
    "clf_coefficients",
    "clf_generate",
    "clf_sample",
    "cluster_quantities",
    "errors",
    "estimate_all",
    "estimate_alpha",
    "estimate_phi",
    "estimate_variance",
    "firth_penalty",
    "firth_penalty_fd",
    "fit",
    "gee_score",
    "generate_dataset",
    "leverage_scores",
    "overcorrection_diagnostic",
    "parse_config",
    "read_csv",
    "results_csv",
    "run_grid",
    "run_replication",
    "run_scenario",
    "summary_json",
    "validate_dataset",
    "wald_test",
    "working_correlation",
    "write_csv",
]
