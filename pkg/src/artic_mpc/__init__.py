"""Real-time estimation and control of an articulated tractor-trailer.

Two closed-loop frameworks are provided: a moving horizon estimator feeding
a nonlinear MPC (both solved with real-time iterations), and an EKF feeding
a linear MPC on an input-state linearised model.
"""
from .model import (ControlInput, Measurement, ModelConstants, NoiseSpec, VaryingParams,
                    VehicleModel, VehicleState, dynamics, integrate, output_map)
from .nmhe import Estimate, EstimationWindow, NmheInstance
from .nmpc import ControllerWeights, NmpcInstance
from .isl import Ekf, LinearSystem, Lmpc, input_transform, state_transform
from .qpcore import ActiveSetSolver, DenseQp, QpSolution
from .simharness import RunConfig, SimLog, compute_metrics, run_closed_loop
from .trajectory import EightTrajectoryConfig, build_eight

__version__ = "0.1.0"

__all__ = [
    "ActiveSetSolver", "ControlInput", "ControllerWeights", "DenseQp", "Ekf",
    "EightTrajectoryConfig", "Estimate", "EstimationWindow", "LinearSystem", "Lmpc",
    "Measurement", "ModelConstants", "NmheInstance", "NmpcInstance", "NoiseSpec",
    "QpSolution", "RunConfig", "SimLog", "VaryingParams", "VehicleModel", "VehicleState",
    "build_eight", "compute_metrics", "dynamics", "input_transform", "integrate",
    "output_map", "run_closed_loop", "state_transform",
]
