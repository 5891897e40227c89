"""Data-driven control of diversion messages at airport curbside roadways."""

from .core import (
    AS_CRIT,
    BIN_MINUTES,
    DS_CRIT,
    ControlInput,
    ConvergenceError,
    CurbsideError,
    DataError,
    DynamicsModel,
    Facility,
    InsufficientDataError,
    InvalidParameterError,
    NoiseModel,
    Scenario,
    SchemaError,
    TimeSeries,
    TrafficState,
    VolumeScale,
    critical_ratio,
)
from .evaluation import (
    EvalConfig,
    ScenarioResult,
    aggregate,
    counterfactual_rollout,
    evaluate_campaign,
    operational_savings,
    speed_ratio_profile,
    vehicle_hours_saved,
)
from .ingest import (
    ScenarioConfig,
    VolumeScaler,
    build_volume_features,
    extract_scenarios,
    load_csv,
    make_regression_dataset,
)
from .mpc import ControlPlan, MpcConfig, receding_horizon, solve, stage_cost
from .plant import PlantStepper
from .sysid import FitConfig, FitReport, GroupSparseDynamicsRegressor, calibrate_noise, evaluate, fit, row_group_prox

__version__ = "0.1.0"

__all__ = [
    "AS_CRIT",
    "BIN_MINUTES",
    "DS_CRIT",
    "ControlInput",
    "ConvergenceError",
    "CurbsideError",
    "DataError",
    "DynamicsModel",
    "Facility",
    "InsufficientDataError",
    "InvalidParameterError",
    "NoiseModel",
    "Scenario",
    "SchemaError",
    "TimeSeries",
    "TrafficState",
    "VolumeScale",
    "critical_ratio",
    "EvalConfig",
    "ScenarioResult",
    "aggregate",
    "counterfactual_rollout",
    "evaluate_campaign",
    "operational_savings",
    "speed_ratio_profile",
    "vehicle_hours_saved",
    "ScenarioConfig",
    "VolumeScaler",
    "build_volume_features",
    "extract_scenarios",
    "load_csv",
    "make_regression_dataset",
    "ControlPlan",
    "MpcConfig",
    "receding_horizon",
    "solve",
    "stage_cost",
    "PlantStepper",
    "FitConfig",
    "FitReport",
    "GroupSparseDynamicsRegressor",
    "calibrate_noise",
    "evaluate",
    "fit",
    "row_group_prox",
]
