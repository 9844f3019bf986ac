"""Criterions: ``output = criterion(model, batch)``.

A criterion receives the model itself, so it may run the model however it
likes. The trainer only sees the returned loss tensor and token count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from seqforge.data import PAD, MiniBatch
from seqforge.numerics import ops
from seqforge.numerics.tensor import Tensor
from seqforge.registry import REGISTRY, Config


@dataclass
class CriterionOutput:
    loss: Tensor  # summed over tokens
    ntokens: int
    logging: dict = field(default_factory=dict)


def _smoothed_coef(targets: np.ndarray, vocab: int, epsilon: float) -> np.ndarray:
    flat = targets.reshape(-1)
    live = flat != PAD
    coef = np.zeros((flat.size, vocab))
    if epsilon:
        coef[live] = epsilon / vocab
    coef[np.flatnonzero(live), flat[live]] += 1.0 - epsilon
    return coef


def _token_loss(model, batch: MiniBatch, epsilon: float) -> CriterionOutput:
    logits = model.forward(batch)
    lprobs = ops.log_softmax(logits)
    V = logits.shape[-1]
    coef = _smoothed_coef(batch.target_out, V, epsilon)
    loss = ops.weighted_nll(lprobs, coef)
    flat_t = batch.target_out.reshape(-1)
    live = flat_t != PAD
    lp = lprobs.data.reshape(-1, V)[live]
    gold = flat_t[live]
    nll = -float(np.sum(lp[np.arange(gold.size), gold]))
    correct = int(np.sum(np.argmax(lp, axis=-1) == gold))
    return CriterionOutput(loss, int(live.sum()), {"nll": nll, "correct": correct, "loss": loss.item()})


class CrossEntropy:
    def __call__(self, model, batch: MiniBatch) -> CriterionOutput:
        return _token_loss(model, batch, 0.0)


class LabelSmoothedCrossEntropy:
    def __init__(self, epsilon: float):
        if not 0.0 <= epsilon < 1.0:
            raise ValueError("label smoothing must lie in [0, 1)")
        self.epsilon = epsilon

    def __call__(self, model, batch: MiniBatch) -> CriterionOutput:
        return _token_loss(model, batch, self.epsilon)


def cross_entropy(model, batch) -> CriterionOutput:
    return CrossEntropy()(model, batch)


def label_smoothed_ce(model, batch, epsilon: float) -> CriterionOutput:
    return LabelSmoothedCrossEntropy(epsilon)(model, batch)


@REGISTRY.register("criterion", "cross_entropy", defaults={})
def _build_ce(cfg: Config):
    return CrossEntropy()


@REGISTRY.register("criterion", "label_smoothed_cross_entropy", defaults={"label_smoothing": 0.1})
def _build_lsce(cfg: Config):
    return LabelSmoothedCrossEntropy(float(cfg["label_smoothing"]))
