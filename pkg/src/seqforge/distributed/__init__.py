"""Synchronous data-parallel training with bucketed all-reduce."""

from seqforge.distributed.scaler import DivergenceError, LossScaler
from seqforge.distributed.trainer import Trainer

__all__ = ["DivergenceError", "LossScaler", "Trainer"]
