"""Minimal dense-tensor engine with tape-based reverse-mode differentiation."""

from . import ops
from .gradcheck import gradcheck, relative_error
from .init import seeded_init
from .module import Module
from .optim import Adam, LrSchedule, adam_step, noam_lr
from .tensor import Parameter, Tape, Tensor, active_tape, backward, default_dtype, float64_mode

__all__ = [
    "Adam", "LrSchedule", "Module", "Parameter", "Tape", "Tensor", "active_tape",
    "adam_step", "backward", "default_dtype", "float64_mode", "gradcheck", "noam_lr",
    "ops", "relative_error", "seeded_init",
]
