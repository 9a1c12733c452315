"""Macro-action-based decentralized multi-agent deep Q-learning."""

from .config import LearnerConfig, TrainConfig
from .core import ContractViolation, EnvSpec, JointStepRecord, MacroEnv, MacroExecutor
from .envs import make_env

__all__ = [
    "ContractViolation",
    "EnvSpec",
    "JointStepRecord",
    "LearnerConfig",
    "MacroEnv",
    "MacroExecutor",
    "TrainConfig",
    "make_env",
]
__version__ = "0.1.0"
