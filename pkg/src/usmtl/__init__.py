"""Desk-scale unified multi-task model: autodiff engine, hooked encoder, pyramid bridge, heads and training."""

from .heads import Family, TaskSpec
from .model import UnifiedModel
from .tensor import Tensor, backward

__all__ = ["Family", "TaskSpec", "Tensor", "UnifiedModel", "backward"]
__version__ = "0.1.0"
