"""Toy-scale two-stage reconstruction of images from synthetic brain responses."""

from .tensor import Tape, Tensor, backward

__all__ = ["Tensor", "Tape", "backward"]
__version__ = "0.1.0"
