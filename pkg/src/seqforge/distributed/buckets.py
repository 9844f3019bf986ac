"""Gradient buckets and the index-ordered all-reduce."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from seqforge.numerics.half import DType, round_to


@dataclass
class GradientBucket:
    start: int
    end: int
    params: tuple[int, ...]  # canonical parameter indices, in fill order
    threshold: int
    filled: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def size(self) -> int:
        return self.end - self.start

    def fill(self, replica: int, flat_grad: np.ndarray) -> None:
        self.filled[replica] = flat_grad[self.start : self.end]

    def ready(self, world: int) -> bool:
        return all(r in self.filled for r in range(world))

    def clear(self) -> None:
        self.filled.clear()


def bucket_gradients(sizes: Sequence[int], threshold: int) -> list[GradientBucket]:
    """Walk parameters back to front, closing a bucket once it holds >= threshold elements.

    Layout depends only on the sizes and the threshold. Buckets come out in
    the order backward completes them: the last parameters first.
    """
    if threshold < 1:
        raise ValueError("bucket threshold must be >= 1")
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    buckets, cur, count = [], [], 0
    for i in reversed(range(len(sizes))):
        cur.append(i)
        count += sizes[i]
        if count >= threshold:
            buckets.append(GradientBucket(int(offsets[cur[-1]]), int(offsets[cur[0] + 1]), tuple(cur), threshold))
            cur, count = [], 0
    if cur:
        buckets.append(GradientBucket(int(offsets[cur[-1]]), int(offsets[cur[0] + 1]), tuple(cur), threshold))
    return buckets


def reduce_bucket(slices: Sequence[np.ndarray], dtype: DType = DType.FP32) -> np.ndarray:
    """Left fold over replicas 0, 1, ..., W-1, rounding after each add."""
    acc = np.array(slices[0], dtype=np.float64)
    for s in slices[1:]:
        acc = round_to(dtype, acc + s)
    return acc


def all_reduce(buckets: Sequence[GradientBucket], world: int, total: int, dtype: DType = DType.FP32) -> np.ndarray:
    """Reduce every bucket into one flat gradient vector of length ``total``.

    Independent of the order in which replicas filled their buckets.
    """
    out = np.zeros(total)
    for b in buckets:
        if not b.ready(world):
            missing = [r for r in range(world) if r not in b.filled]
            raise RuntimeError(f"bucket [{b.start}, {b.end}) missing replicas {missing}")
        out[b.start : b.end] = reduce_bucket([b.filled[r] for r in range(world)], dtype)
    return out
