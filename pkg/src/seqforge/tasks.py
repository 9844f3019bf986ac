"""Tasks own the dictionaries and the data, and know how to batch it."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from seqforge.data import (
    PAD,
    Dictionary,
    EpochPlan,
    MiniBatch,
    build_dictionary,
    collate,
    load_parallel,
    make_batches,
    make_pairs,
)
from seqforge.numerics.half import DType
from seqforge.registry import REGISTRY, Config

TASK_DEFAULTS = {"data": "", "min_count": 1, "max_tokens": 4096, "max_sentences": 0}


class TranslationTask:
    """Parallel-corpus task; also covers copy and other toy seq2seq tasks."""

    def __init__(
        self,
        src_dict: Dictionary,
        tgt_dict: Dictionary,
        train_sents: Sequence = ((), ()),
        valid_sents: Sequence = ((), ()),
        max_tokens: int = 4096,
        max_sentences: Optional[int] = None,
        seed: int = 1,
    ):
        self.src_dict, self.tgt_dict = src_dict, tgt_dict
        self.max_tokens = max_tokens
        self.max_sentences = max_sentences or None
        self.seed = seed
        self.splits = {
            "train": make_pairs(src_dict, tgt_dict, *train_sents),
            "valid": make_pairs(src_dict, tgt_dict, *valid_sents),
        }
        self._plan: Optional[EpochPlan] = None

    @classmethod
    def from_sentences(cls, train_src, train_tgt, valid_src=(), valid_tgt=(), min_count=1, **kw) -> TranslationTask:
        src_dict = build_dictionary(train_src, min_count)
        tgt_dict = build_dictionary(train_tgt, min_count)
        return cls(src_dict, tgt_dict, (train_src, train_tgt), (valid_src, valid_tgt), **kw)

    @classmethod
    def from_dir(cls, data_dir, min_count=1, **kw) -> TranslationTask:
        d = Path(data_dir)
        train = load_parallel(d / "train.src", d / "train.tgt")
        valid = ([], [])
        if (d / "valid.src").exists():
            valid = load_parallel(d / "valid.src", d / "valid.tgt")
        return cls.from_sentences(*train, *valid, min_count=min_count, **kw)

    def pairs(self, split: str = "train"):
        return self.splits[split]

    def plan(self) -> EpochPlan:
        if self._plan is None:
            self._plan = make_batches(self.splits["train"], self.max_tokens, self.max_sentences, self.seed)
        return self._plan

    def collate(self, members, split: str = "train") -> MiniBatch:
        return collate(self.splits[split], members)

    def build_model(self, model_cfg: Config, seed: int, dtype: DType = DType.FP32):
        return REGISTRY.instantiate("model", "transformer", model_cfg, src_vocab=len(self.src_dict),
                                    tgt_vocab=len(self.tgt_dict), seed=seed, dtype=dtype)

    def evaluate(self, model, split: str = "valid", max_tokens: Optional[int] = None) -> dict:
        """Teacher-forced token accuracy and mean NLL over a split."""
        pairs = self.splits[split]
        plan = make_batches(pairs, max_tokens or self.max_tokens)
        correct = total = 0
        nll = 0.0
        for members in plan.batches:
            batch = collate(pairs, members)
            logits = model.forward(batch).data
            m = logits.max(axis=-1, keepdims=True)
            lp = logits - m - np.log(np.exp(logits - m).sum(axis=-1, keepdims=True))
            live = batch.target_out != PAD
            gold = batch.target_out[live]
            lp = lp[live]
            correct += int(np.sum(lp.argmax(axis=-1) == gold))
            nll -= float(lp[np.arange(gold.size), gold].sum())
            total += gold.size
        return {"accuracy": correct / total if total else float("nan"), "nll": nll / total if total else float("nan"),
                "ntokens": total}


@REGISTRY.register("task", "translation", defaults=TASK_DEFAULTS)
def _build_translation(cfg: Config, seed: int = 1):
    if not cfg["data"]:
        raise ValueError("the translation task needs a 'data' directory")
    return TranslationTask.from_dir(
        cfg["data"], min_count=cfg["min_count"], max_tokens=cfg["max_tokens"],
        max_sentences=cfg["max_sentences"], seed=seed,
    )
