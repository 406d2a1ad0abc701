"""Skeleton activity recognition with attention, on a small reverse-mode autodiff core."""

from .autodiff import Tensor, backward, gradient_check, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "gradient_check", "no_grad", "__version__"]
