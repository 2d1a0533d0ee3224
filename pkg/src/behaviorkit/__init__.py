"""Domain-adaptive masked latent pretraining and attentive probing for animal behavior video."""

from .config import ExperimentConfig, PRESETS, desk_preset, reference_preset
from .errors import (BehaviorKitError, CheckpointError, InvalidArgumentError, NoValidCropError,
                     NonFiniteLossError)

__version__ = "0.1.0"

__all__ = [
    "BehaviorKitError",
    "CheckpointError",
    "ExperimentConfig",
    "InvalidArgumentError",
    "NoValidCropError",
    "NonFiniteLossError",
    "PRESETS",
    "desk_preset",
    "reference_preset",
]
