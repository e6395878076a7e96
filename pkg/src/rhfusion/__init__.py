"""Receding-horizon (limited-memory) Kalman filtering and distributed fusion
for continuous-time linear systems with multiple sensors."""

from .model import (
    LtvSystem,
    PiecewiseMatrix,
    Scenario,
    ScenarioConfig,
    ScenarioError,
    SensorModel,
    SensorSuite,
    ValidationError,
    load_scenario,
    scenario_from_dict,
    stack_sensors,
    validate,
    watertank_path,
)
from .numerics import EstimatorState, TimeGrid

__version__ = "0.1.0"
