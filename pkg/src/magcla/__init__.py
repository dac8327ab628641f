"""Multi-agent deterministic policy gradients for cooperative in-hand rotation."""

__version__ = "0.1.0"

from .agents import AlgorithmVariant, Ensemble  # noqa: E402
from .env import EnvConfig, MalfunctionMask, RotationEnv, ReachEnv, Trial, make_env  # noqa: E402
from .estimator import MagclaPolicy  # noqa: E402
from .trainer import TrainConfig, train  # noqa: E402

__all__ = ["AlgorithmVariant", "Ensemble", "EnvConfig", "MagclaPolicy", "MalfunctionMask", "ReachEnv",
           "RotationEnv", "TrainConfig", "Trial", "make_env", "train", "__version__"]
