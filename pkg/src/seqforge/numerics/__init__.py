from seqforge.numerics.check import NonFiniteProbe, grad_check
from seqforge.numerics.half import DType, on_grid, quantize_fp16, quantize_fp32, round_to
from seqforge.numerics.ops import deterministic_sum, fold_sum
from seqforge.numerics.rng import RngStream, derive_stream_id
from seqforge.numerics.tensor import Node, Tape, Tensor, current_tape

__all__ = [
    "DType",
    "Node",
    "NonFiniteProbe",
    "RngStream",
    "Tape",
    "Tensor",
    "current_tape",
    "derive_stream_id",
    "deterministic_sum",
    "fold_sum",
    "grad_check",
    "on_grid",
    "quantize_fp16",
    "quantize_fp32",
    "round_to",
]
