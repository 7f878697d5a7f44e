"""SE-DenseNet multitask grading: a numpy autodiff engine, squeeze-and-excitation
DenseNet backbones, training pipeline, and evaluation metrics."""

from . import checkpoint, data, metrics, nn, optim, pipeline, tensor
from .nn import FusionModel, NetworkSpec, SEDenseNet, build_fusion_mlp, build_sedensenet
from .pipeline import Config, load_config, train_multitask

__version__ = "0.1.0"

__all__ = [
    "checkpoint",
    "data",
    "metrics",
    "nn",
    "optim",
    "pipeline",
    "tensor",
    "Config",
    "FusionModel",
    "NetworkSpec",
    "SEDenseNet",
    "build_fusion_mlp",
    "build_sedensenet",
    "load_config",
    "train_multitask",
]
