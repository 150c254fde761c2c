"""Attention-gated bilinear CNN for ordinal image grading, on a small numpy autodiff core."""

from .tensor import Tape, Tensor, backward, diagnostics

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "backward", "diagnostics", "__version__"]
