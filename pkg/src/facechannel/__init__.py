"""FaceChannel: a small numpy convolutional network for facial expression recognition."""

from .metrics import EvalReport, accuracy, ccc, confusion, pearson
from .model import ModelConfig, build_model, count_parameters
from .training import TrainConfig, evaluate, finetune, train
from .weights import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "EvalReport",
    "ModelConfig",
    "TrainConfig",
    "accuracy",
    "build_model",
    "ccc",
    "confusion",
    "count_parameters",
    "evaluate",
    "finetune",
    "load_weights",
    "pearson",
    "save_weights",
    "train",
]
