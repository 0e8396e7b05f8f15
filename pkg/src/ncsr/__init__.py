"""Noise-conditional normalizing flow for stochastic super-resolution.

Train with exact likelihoods on noise-perturbed HR/LR pairs, sample
diverse HR reconstructions with temperature control, and evaluate
sample sets with diversity and LR-consistency metrics.
"""

from .model import ModelConfig, NCSRModel, load_checkpoint, save_checkpoint
from .rng import Rng
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "NCSRModel",
    "Rng",
    "Tensor",
    "load_checkpoint",
    "save_checkpoint",
]

__version__ = "0.1.0"
