"""Sparse functional logistic classification with a dual augmented Lagrangian solver."""

from .exceptions import (
    ConfigError,
    DataError,
    DualInfeasibleError,
    FsfcError,
    LineSearchStalled,
    ModelFormatError,
    NewtonSystemSingular,
)
from .funcdata import (
    CurvePanel,
    FpcBasis,
    ScoreMatrix,
    TimeGrid,
    compute_fpc,
    compute_fpc_all,
    compute_scores,
    standardize_panel,
)
from .selection import FittedModel, PipelineConfig, fit_pipeline, predict
from .simlab import ScenarioSpec, generate_scenario, run_replications
from .solver import SolverConfig, dal_fit

__all__ = [
    "ConfigError", "DataError", "DualInfeasibleError", "FsfcError", "LineSearchStalled",
    "ModelFormatError", "NewtonSystemSingular", "CurvePanel", "FpcBasis", "ScoreMatrix",
    "TimeGrid", "compute_fpc", "compute_fpc_all", "compute_scores", "standardize_panel",
    "FittedModel", "PipelineConfig", "fit_pipeline", "predict", "ScenarioSpec", "generate_scenario",
    "run_replications", "SolverConfig", "dal_fit",
]
__version__ = "0.1.0"
