"""Minimal numpy tensor engine with reverse-mode autodiff."""

from . import ops
from .gradcheck import gradcheck, max_rel_error, numerical_grad
from .ops import ConfigurationError, EmptyMaskWarning, MacCounter, count_macs
from .optim import AdamW, adamw_step
from .tensor import DimensionError, Tape, Tensor, UsageError, is_grad_enabled, no_grad

__all__ = [
    "AdamW",
    "ConfigurationError",
    "DimensionError",
    "EmptyMaskWarning",
    "MacCounter",
    "Tape",
    "Tensor",
    "UsageError",
    "adamw_step",
    "count_macs",
    "gradcheck",
    "is_grad_enabled",
    "max_rel_error",
    "no_grad",
    "numerical_grad",
    "ops",
]
