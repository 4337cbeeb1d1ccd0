"""Label-distribution learning for multi-source generalizable retrieval."""

from .ldl_engine import DomainLayout, LDLEngine
from .losses import LossBreakdown, overall_loss
from .model import ModelParams, TrainConfig, train
from .synth_data import SyntheticSpec, generate

__all__ = [
    "DomainLayout",
    "LDLEngine",
    "LossBreakdown",
    "ModelParams",
    "SyntheticSpec",
    "TrainConfig",
    "generate",
    "overall_loss",
    "train",
]
__version__ = "0.1.0"
