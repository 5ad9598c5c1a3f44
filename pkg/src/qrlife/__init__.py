"""Causal quantile-residual-lifetime contrasts for right-censored data.

Estimates the between-arm difference of residual-life quantiles among
landmark survivors via naive, inverse-weighted, doubly robust, and
principal-score-weighted estimators, with nonparametric bootstrap inference
and a reproducible Monte Carlo study harness.
"""

__version__ = "0.1.0"

from .data import (
    ColumnSchema,
    Dataset,
    FormulaSpec,
    ParseError,
    SchemaError,
    SurvivalRecord,
    ValidationError,
    design_matrix,
    ingest_csv,
)
from .nuisance import (
    CoxFit,
    FitError,
    KMCurve,
    LogisticFit,
    ModelSpecs,
    NuisanceSet,
    StepFunction,
    fit_cox,
    fit_km,
    fit_logistic,
    fit_nuisances,
    survival_at,
)
from .estimators import (
    METHODS,
    DeltaEstimate,
    EstimandSpec,
    EstimationError,
    QuantileEstimate,
    SelectionWeights,
    estimate_delta,
    km_residual_quantile,
    selection_weights,
    solve_quantile,
    u_dr,
    u_iw,
)
from .inference import BootstrapResult, bootstrap_delta
from .simulation import (
    SCENARIOS,
    CellResult,
    DGPConfig,
    GeneratedSample,
    LatentOutcomes,
    SimulationReport,
    StudyConfig,
    TruthValues,
    generate,
    run_study,
    scenario_model_specs,
    true_values,
)

__all__ = [
    "__version__",
    # data
    "ColumnSchema", "Dataset", "FormulaSpec", "ParseError", "SchemaError",
    "SurvivalRecord", "ValidationError", "design_matrix", "ingest_csv",
    # nuisance
    "CoxFit", "FitError", "KMCurve", "LogisticFit", "ModelSpecs",
    "NuisanceSet", "StepFunction", "fit_cox", "fit_km", "fit_logistic",
    "fit_nuisances", "survival_at",
    # estimators
    "METHODS", "DeltaEstimate", "EstimandSpec", "EstimationError",
    "QuantileEstimate", "SelectionWeights", "estimate_delta",
    "km_residual_quantile", "selection_weights", "solve_quantile",
    "u_dr", "u_iw",
    # inference
    "BootstrapResult", "bootstrap_delta",
    # simulation
    "SCENARIOS", "CellResult", "DGPConfig", "GeneratedSample",
    "LatentOutcomes", "SimulationReport", "StudyConfig", "TruthValues",
    "generate", "run_study", "scenario_model_specs", "true_values",
]
