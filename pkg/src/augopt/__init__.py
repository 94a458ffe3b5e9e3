"""Learned differentiable augmentation for semi-supervised contrastive training."""

from .tensor import Tensor, no_grad, Rng

__all__ = ["Tensor", "no_grad", "Rng"]
__version__ = "0.1.0"
