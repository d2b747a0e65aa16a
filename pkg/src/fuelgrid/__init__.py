"""Solver and verification toolkit for controlled diffusions with singular
controls, discretionary stopping, domain exit, and fuel constraints."""

from .controls import (
    BVControlPath,
    ConstantPolicy,
    Decision,
    NoiseFunctionalPolicy,
    StopIndicatorPath,
    TimeGrid,
    TruncationMode,
    fuel_process,
    indicator_of_stop_step,
    replay_policy,
    stop_time_of,
    total_variation,
    truncate_control,
)
from .problem import (
    FiniteFuel,
    InfiniteFuel,
    ProblemSpec,
    SegmentIntegral,
    Stieltjes,
    ValidationReport,
    load_problem,
    validate_problem,
)

__version__ = "0.1.0"
