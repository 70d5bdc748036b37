"""Multi-action value learning over factored action spaces.

Two coupled Q-functions, one per sub-action, trained by temporal differences,
with DQN/DDQN baselines, a discrete block-stacking simulator and an exact
value-iteration oracle for small MDPs.
"""

from manrl.core import (
    ConfigError,
    ContractViolation,
    EmptyBufferError,
    EpsilonSchedule,
    FactoredActionSpace,
    NumericError,
    ReplayBuffer,
    ShapeError,
    Transition,
    make_rng,
)

__all__ = [
    "ConfigError",
    "ContractViolation",
    "EmptyBufferError",
    "EpsilonSchedule",
    "FactoredActionSpace",
    "NumericError",
    "ReplayBuffer",
    "ShapeError",
    "Transition",
    "make_rng",
]

__version__ = "0.1.0"
