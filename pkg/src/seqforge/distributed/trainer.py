"""Synchronous data-parallel training over in-process replicas.

Each replica holds its own parameter copy and runs forward/backward over its
A sub-batches, summing gradients locally. Gradient buckets are then reduced
across replicas by a left fold in replica-index order, the sum is divided by
the global token count, and one optimizer step updates the FP32 master, which
is copied back to every replica.

With ``fp16`` the replicas hold an FP16E shadow of the master, the loss
gradient is scaled before backward, and the reduction also runs in FP16E;
the reduced gradient is unscaled in FP32 before the update.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from seqforge.distributed.buckets import all_reduce, bucket_gradients
from seqforge.distributed.scaler import LossScaler
from seqforge.models.transformer import OverflowSignal
from seqforge.numerics.half import DType, quantize_fp32, round_to
from seqforge.numerics.tensor import Tape


@dataclass
class StepLog:
    step: int
    loss: float  # summed over tokens, unscaled
    nll: float
    ntokens: int
    correct: int
    lr: float
    scale: float
    skipped: bool
    overflow: bool

    def loss_per_token(self) -> float:
        return self.loss / self.ntokens if self.ntokens else float("nan")


@dataclass
class _ReplicaResult:
    grad: Optional[np.ndarray]
    loss: float = 0.0
    nll: float = 0.0
    ntokens: int = 0
    correct: int = 0
    overflow: bool = False
    bucket_order: list = field(default_factory=list)


class Trainer:
    def __init__(
        self,
        model,
        criterion,
        optimizer,
        scheduler,
        *,
        workers: int = 1,
        accum: int = 1,
        fp16: bool = False,
        scaler: Optional[LossScaler] = None,
        bucket_threshold: int = 2**14,
        threads: bool = False,
    ):
        if workers < 1 or accum < 1:
            raise ValueError("workers and accum must be >= 1")
        self.criterion = criterion
        self.optimizer = optimizer
        self.scheduler = scheduler
        self.workers, self.accum = workers, accum
        self.fp16 = fp16
        self.dtype = DType.FP16E if fp16 else DType.FP32
        self.scaler = scaler if scaler is not None else (LossScaler() if fp16 else None)
        self.master = quantize_fp32(model.flat())
        self.replicas = [model.clone(self.dtype) for _ in range(workers)]
        self._broadcast()
        self.buckets = bucket_gradients(model.sizes(), bucket_threshold)
        self.total = int(self.master.size)
        self.step = 0
        self.threads = threads
        self.last_bucket_order: list[list[int]] = []

    @property
    def model(self):
        return self.replicas[0]

    def _broadcast(self) -> None:
        for rep in self.replicas:
            rep.load_flat(self.master)

    def replicas_in_sync(self) -> bool:
        ref = round_to(self.dtype, self.master)
        return all(np.array_equal(rep.flat(), ref) for rep in self.replicas)

    def _run_replica(self, r: int, batches) -> _ReplicaResult:
        rep = self.replicas[r]
        rep.training = True
        seed = self.scaler.scale if self.fp16 else 1.0
        res = _ReplicaResult(None)
        for a, batch in enumerate(batches):
            rep.dropout_key = (self.step, r, a)
            with Tape() as tape:
                out = self.criterion(rep, batch)
            res.loss += out.loss.item()
            res.ntokens += out.ntokens
            res.nll += out.logging.get("nll", 0.0)
            res.correct += out.logging.get("correct", 0)
            try:
                g = rep.backward(tape, out.loss, seed)
            except OverflowSignal:
                res.overflow = True
                g = np.full(self.total, np.inf)
            res.grad = g if res.grad is None else round_to(self.dtype, res.grad + g)
        rep.training = False
        finish = getattr(rep, "last_finish", None)
        if finish is not None:
            done = [max(finish[i] for i in b.params) for b in self.buckets]
            res.bucket_order = sorted(range(len(self.buckets)), key=lambda b: done[b])
        return res

    def train_step(
        self,
        sub_batches: Sequence[Sequence],
        grad_hook: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
    ) -> StepLog:
        """One synchronized update; ``sub_batches[r]`` holds replica r's A sub-batches.

        ``grad_hook(r, grad)`` may replace a replica's local gradient before
        reduction (fault injection in tests).
        """
        if len(sub_batches) != self.workers or any(len(s) != self.accum for s in sub_batches):
            raise ValueError(f"expected {self.workers} replicas x {self.accum} sub-batches")
        if self.threads and self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                results = list(pool.map(self._run_replica, range(self.workers), sub_batches))
        else:
            results = [self._run_replica(r, b) for r, b in enumerate(sub_batches)]

        for b in self.buckets:
            b.clear()
        for r, res in enumerate(results):
            g = res.grad if grad_hook is None else grad_hook(r, res.grad)
            for b in self.buckets:
                b.fill(r, g)
        self.last_bucket_order = [res.bucket_order for res in results]
        reduced = all_reduce(self.buckets, self.workers, self.total, self.dtype)

        ntokens = sum(res.ntokens for res in results)
        overflow = any(res.overflow for res in results) or not bool(np.all(np.isfinite(reduced)))
        scale = self.scaler.scale if self.fp16 else 1.0
        lr = self.scheduler.next_lr()
        log = StepLog(
            self.step,
            sum(res.loss for res in results),
            sum(res.nll for res in results),
            ntokens,
            sum(res.correct for res in results),
            lr,
            scale,
            skipped=overflow,
            overflow=overflow,
        )
        if self.fp16:
            self.scaler.update(overflow)
        if not overflow and ntokens > 0:
            g = quantize_fp32(reduced)
            if scale != 1.0:
                g = quantize_fp32(g / scale)
            g = quantize_fp32(g / ntokens)
            self.master = self.optimizer.step(self.master, g, lr)
            self.scheduler.advance()
            self._broadcast()
        elif not overflow:
            log.skipped = True
        self.step += 1
        return log

    # -- state --------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "params": self.master.copy(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": {"num_updates": self.scheduler.num_updates},
            "scaler": None if self.scaler is None else self.scaler.state_dict(),
            "step": self.step,
        }

    def load_state_dict(self, d: dict) -> None:
        self.master = quantize_fp32(np.asarray(d["params"], dtype=np.float64))
        self.optimizer.load_state_dict(d["optimizer"])
        self.scheduler.num_updates = int(d["scheduler"]["num_updates"])
        if d.get("scaler") is not None:
            self.scaler = LossScaler.from_state(d["scaler"])
        self.step = int(d["step"])
        self._broadcast()


def split_rows(batch_members: Sequence[int], parts: int) -> list[list[int]]:
    """Split a member list into ``parts`` contiguous, nearly equal groups."""
    n = len(batch_members)
    if parts > n:
        raise ValueError(f"cannot split {n} rows into {parts} sub-batches")
    bounds = [math.floor(i * n / parts) for i in range(parts + 1)]
    return [list(batch_members[bounds[i] : bounds[i + 1]]) for i in range(parts)]
