"""Safe force/position control of a floating-base manipulator in compliant contact."""

__version__ = "0.1.0"

from .config import ConfigError, ScenarioConfig, default_config, load_config, validate
from .contact import ContactKind, ContactLost, ContactModel, GradientBoundViolation, InteractionWrench
from .dyn_cbf import DynCbfParams, InfeasibleTorqueQP, VelocityBounds, safe_torque_filter
from .dynamics import DynamicsModel, forward_dynamics, mass_matrix, reference_dynamics
from .kin_cbf import InfeasibleFilter, KinCbfParams, SafetyBounds, safe_velocity_filter
from .kinematics import KinematicModel, RepresentationSingularity, forward_kinematics, jacobian
from .sim import ControllerSession, Plant, SimLog, run_scenario, summarize
from .task_errors import TaskReference, compute_errors

__all__ = [
    "ConfigError", "ContactKind", "ContactLost", "ContactModel", "ControllerSession",
    "DynCbfParams", "DynamicsModel", "GradientBoundViolation", "InfeasibleFilter",
    "InfeasibleTorqueQP", "InteractionWrench", "KinCbfParams", "KinematicModel", "Plant",
    "RepresentationSingularity", "SafetyBounds", "ScenarioConfig", "SimLog", "TaskReference",
    "VelocityBounds", "compute_errors", "default_config", "forward_dynamics", "forward_kinematics",
    "jacobian", "load_config", "mass_matrix", "reference_dynamics", "run_scenario",
    "safe_torque_filter", "safe_velocity_filter", "summarize", "validate",
]
