"""Diffusion-guided state-space saliency detection on a small numpy autodiff core."""
from .network import DGSSM, ModelConfig, SaliencyMap
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = ["DGSSM", "ModelConfig", "SaliencyMap", "Tape", "Tensor"]
