"""Real-time NMPC trajectory tracking for skid-steered platforms."""

from .config import ControllerConfig, NetworkConfig, load_config, parse_config
from .controller import Controller, IterationRecord, RecordSink, SensorSnapshot, run_loop
from .metrics import RunLog, position_errors, report, timing_percentiles, velocity_errors
from .model import Integrator, PlatformParams, WheelRates, body_twist, integrate_step, smooth_deadzone, state_derivative
from .plant import Plant, PlantConfig, PlantState, open_loop_sine_test, plant_step
from .se2 import Frame, Pose, Twist, adjoint_transform, rotation_matrix, wrap_angle
from .simrun import SimResult, run_closed_loop
from .solver import (
    KktResidual,
    SolverMode,
    SolverSettings,
    SolverState,
    SolverStatus,
    kkt_residual,
    solve,
    warm_start_shift,
)
from .trajectories import TrajectoryKind, TrajectorySpec, horizon_references, sample_reference
from .transcription import (
    Bounds,
    DecisionVector,
    HorizonConfig,
    NlpProblem,
    Weights,
    acceleration_rows,
    build_nlp,
    gradient_check,
    shooting_defect,
)

__version__ = "0.1.0"
