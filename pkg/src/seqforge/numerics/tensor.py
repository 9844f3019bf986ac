"""Tensors and the reverse-mode tape."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from seqforge.numerics.half import DType, round_to


class Tensor:
    """Dense row-major array whose values sit on the grid of ``dtype``."""

    __slots__ = ("data", "dtype", "name", "__weakref__")

    def __init__(self, data, dtype: DType = DType.FP32, name: Optional[str] = None, *, exact=False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr if exact else round_to(dtype, arr)
        self.dtype = dtype
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype.value})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps the output gradient to one gradient (or None) per input
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    # recomputes the output data from the current input data
    forward: Callable[[], np.ndarray]


_local = threading.local()


def current_tape() -> Optional["Tape"]:
    return getattr(_local, "tape", None)


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives executed inside the block append a
    node. Tapes are thread-local, so replicas on separate threads each get
    their own.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        self._prev = current_tape()
        _local.tape = self
        return self

    def __exit__(self, *exc):
        _local.tape = self._prev
        return False

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def replay(self) -> bool:
        """Recompute every node forward; True if all outputs match bitwise."""
        for node in self.nodes:
            if not np.array_equal(node.forward(), node.output.data, equal_nan=True):
                return False
        return True

    def backward(self, loss: Tensor, seed: float = 1.0, leaves=None):
        """Propagate from ``loss`` in exact reverse recording order.

        Returns ``(grads, finish)``: ``grads`` maps ``id(tensor)`` to its
        gradient for every tensor reached; ``finish`` maps ``id(leaf)`` to the
        index (counted from the start of the backward pass) of the last node
        that contributed to it.
        """
        grads: dict[int, np.ndarray] = {
            id(loss): round_to(loss.dtype, np.full(loss.shape, seed, dtype=np.float64))
        }
        finish: dict[int, int] = {}
        leaf_ids = None if leaves is None else {id(t) for t in leaves}
        for k, node in enumerate(reversed(self.nodes)):
            gout = grads.pop(id(node.output), None)
            if gout is None:
                continue
            in_grads = node.backward(gout)
            for inp, g in zip(node.inputs, in_grads):
                if g is None:
                    continue
                g = round_to(inp.dtype, g)
                key = id(inp)
                prev = grads.get(key)
                grads[key] = g if prev is None else round_to(inp.dtype, prev + g)
                if leaf_ids is None or key in leaf_ids:
                    finish[key] = k
        return grads, finish
