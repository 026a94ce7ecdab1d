"""Memory-augmented semantic segmentation at desk scale."""

from .estimator import MemorySegmenter
from .memory import FeatureMemory, MomentumSchedule, momentum_at, update_memory
from .model import ModelConfig, SegModel, load_checkpoint, save_checkpoint
from .numerics import Parameter, Tensor
from .synthdata import SegSample, SynthTaskSpec, generate_dataset
from .trainer import TrainConfig, evaluate, poly_lr, train

__all__ = [
    "MemorySegmenter",
    "FeatureMemory",
    "MomentumSchedule",
    "momentum_at",
    "update_memory",
    "ModelConfig",
    "SegModel",
    "load_checkpoint",
    "save_checkpoint",
    "Parameter",
    "Tensor",
    "SegSample",
    "SynthTaskSpec",
    "generate_dataset",
    "TrainConfig",
    "evaluate",
    "poly_lr",
    "train",
]

__version__ = "0.1.0"
