"""MFF-CCA U-Net: a numpy deep-learning micro-framework for 2-D medical image segmentation."""
from .estimator import MFFUNetSegmenter
from .model import Model, ModelConfig, build_model, model_forward, param_count
from .tensor import Tensor, backward, no_grad, precision, tensor_create

__version__ = "0.1.0"

__all__ = [
    "MFFUNetSegmenter",
    "Model",
    "ModelConfig",
    "Tensor",
    "backward",
    "build_model",
    "model_forward",
    "no_grad",
    "param_count",
    "precision",
    "tensor_create",
]
