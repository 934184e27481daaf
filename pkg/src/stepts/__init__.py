"""Scientific time-series encoder with learnable adaptive patching,
statistics compensation and multi-teacher feature distillation."""

from .config import EncoderConfig, PatchingConfig, TrainPlan
from .encoder import StepModel

__all__ = ["EncoderConfig", "PatchingConfig", "TrainPlan", "StepModel"]
