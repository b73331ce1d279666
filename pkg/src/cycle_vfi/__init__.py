"""Cycle-consistent frame interpolation: synthesis model, losses, training and evaluation."""
from .estimator import CycleInterpolator
from .losses import LossWeights
from .metrics import EvalReport, evaluate, psnr, ssim
from .model import InterpolationModel, ModelConfig, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, Trainer, finetune, train

__version__ = "0.1.0"

__all__ = [
    "CycleInterpolator", "EvalReport", "InterpolationModel", "LossWeights", "ModelConfig",
    "TrainConfig", "Trainer", "evaluate", "finetune", "load_checkpoint", "psnr",
    "save_checkpoint", "ssim", "train",
]
