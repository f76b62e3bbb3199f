"""Minimal reverse-mode autodiff: tensors, a recording tape, and a gradient checker."""

from melseq.autodiff.engine import Tape, Tensor, current_tape
from melseq.autodiff.gradcheck import grad_check, grad_check_params
from melseq.autodiff.layers import Params, gru_cell, linear

__all__ = [
    "Params",
    "Tape",
    "Tensor",
    "current_tape",
    "grad_check",
    "grad_check_params",
    "gru_cell",
    "linear",
]
