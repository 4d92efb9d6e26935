"""Minimal reverse-mode autodiff over real and complex numpy tensors."""

from .complex import ComplexTensor
from .gradcheck import GradcheckError, finite_diff_gradcheck
from .tensor import Tape, TapeError, Tensor, backward

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "backward",
    "ComplexTensor",
    "finite_diff_gradcheck",
    "GradcheckError",
]
