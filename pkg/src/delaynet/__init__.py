"""Predictor-observer control of linear plants over bounded time-varying delays."""

from .config import ConfigError, ScenarioConfig, load_config
from .delays import DelayBounds, DelayChannel, TimestampedMeasurement
from .models import (
    FIELD_TEST_PARAMS,
    TABLE1_PARAMS,
    DiscreteLti,
    LateralParams,
    UncertaintyModel,
    build_lateral_continuous,
    discretize_zoh,
    lateral_model,
)
from .predictor import Gains, PredictorObserver
from .simulation import (
    batch_runs,
    compute_metrics,
    dlqr,
    gen_lane_change,
    run_closed_loop,
)
from .stability import (
    build_interconnected,
    check_mi,
    hinf_norm_poly,
    search_feasible_P,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "load_config",
    "DelayBounds",
    "DelayChannel",
    "TimestampedMeasurement",
    "FIELD_TEST_PARAMS",
    "TABLE1_PARAMS",
    "DiscreteLti",
    "LateralParams",
    "UncertaintyModel",
    "build_lateral_continuous",
    "discretize_zoh",
    "lateral_model",
    "Gains",
    "PredictorObserver",
    "batch_runs",
    "compute_metrics",
    "dlqr",
    "gen_lane_change",
    "run_closed_loop",
    "build_interconnected",
    "check_mi",
    "hinf_norm_poly",
    "search_feasible_P",
]
