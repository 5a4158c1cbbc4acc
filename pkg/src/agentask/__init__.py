"""Edge-level clarification controller for multi-agent pipelines: simulator, SFT and E-GRPO training, audit."""

from .core import Action, EdgeState, ErrorType, RewardConfig, Trajectory
from .env import EnvConfig, Environment
from .policy import PolicyParams

__version__ = "0.1.0"

__all__ = ["Action", "EdgeState", "EnvConfig", "Environment", "ErrorType", "PolicyParams", "RewardConfig",
           "Trajectory", "__version__"]
