"""Desk-scale offline-to-online RL with a Homeostasis-gated policy switcher."""

from .controllers import ControllerConfig, make_controller
from .core import Policy, PolicySet, ReplayBuffer, Transition, UnionBuffer
from .envs import Corridor, DatasetTier, GridMaze, generate_offline_dataset, make_env
from .harness import ExperimentSpec, MetricsRow, play_online_stage, run_online_stage
from .homeo import HomeoState, homeo_update, value_promise_discrepancy
from .learner import Checkpoint, LearnerConfig, TabularIQL

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ControllerConfig",
    "Corridor",
    "DatasetTier",
    "ExperimentSpec",
    "GridMaze",
    "HomeoState",
    "LearnerConfig",
    "MetricsRow",
    "Policy",
    "PolicySet",
    "ReplayBuffer",
    "TabularIQL",
    "Transition",
    "UnionBuffer",
    "generate_offline_dataset",
    "homeo_update",
    "make_controller",
    "make_env",
    "play_online_stage",
    "run_online_stage",
    "value_promise_discrepancy",
]
