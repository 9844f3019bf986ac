"""Transformer encoder-decoder on emulated precisions."""

from seqforge.models.transformer import CapacityError, TransformerModel

__all__ = ["CapacityError", "TransformerModel"]
