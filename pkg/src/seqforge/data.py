"""Dictionaries, corpus loading and padding-minimizing batching."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from seqforge.numerics.rng import RngStream

logger = logging.getLogger(__name__)

BOS, PAD, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<s>", "<pad>", "</s>", "<unk>")


class Dictionary:
    """Dense symbol <-> id map with four reserved ids in front."""

    def __init__(self):
        self.symbols: list[str] = list(RESERVED)
        self.counts: list[int] = [0, 0, 0, 0]
        self.indices: dict[str, int] = {s: i for i, s in enumerate(RESERVED)}

    bos, pad, eos, unk = BOS, PAD, EOS, UNK

    def __len__(self):
        return len(self.symbols)

    def __eq__(self, other):
        return isinstance(other, Dictionary) and self.symbols == other.symbols and self.counts == other.counts

    def add_symbol(self, sym: str, count: int) -> int:
        if sym in self.indices:
            raise ValueError(f"duplicate symbol {sym!r}")
        self.indices[sym] = len(self.symbols)
        self.symbols.append(sym)
        self.counts.append(count)
        return self.indices[sym]

    def index(self, sym: str) -> int:
        return self.indices.get(sym, UNK)

    def string(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i in (BOS, PAD):
                continue
            out.append(self.symbols[i])
        return " ".join(out)

    def to_lines(self) -> list[str]:
        return [f"{s} {c}" for s, c in zip(self.symbols[4:], self.counts[4:])]

    @classmethod
    def from_lines(cls, lines: Iterable[str]) -> Dictionary:
        d = cls()
        for line in lines:
            line = line.rstrip("\n")
            if not line:
                continue
            sym, count = line.rsplit(" ", 1)
            d.add_symbol(sym, int(count))
        return d

    def save(self, path) -> None:
        Path(path).write_text("".join(line + "\n" for line in self.to_lines()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Dictionary:
        return cls.from_lines(Path(path).read_text(encoding="utf-8").splitlines())


def build_dictionary(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Dictionary:
    """Ids by descending count, ties broken lexicographically."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(tok for sent in corpus for tok in sent)
    d = Dictionary()
    for sym, c in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if c >= min_count and sym not in d.indices:
            d.add_symbol(sym, c)
    return d


def encode(d: Dictionary, tokens: Sequence[str]) -> list[int]:
    return [d.index(t) for t in tokens] + [EOS]


@dataclass(frozen=True)
class SequencePair:
    source: tuple[int, ...]
    target: tuple[int, ...]
    index: int


def read_lines(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as f:
        return [line.split() for line in f.read().splitlines()]


def load_parallel(src_path, tgt_path) -> tuple[list[list[str]], list[list[str]]]:
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise ValueError(f"{src_path} has {len(src)} lines but {tgt_path} has {len(tgt)}")
    return src, tgt


def make_pairs(src_dict, tgt_dict, src_sents, tgt_sents) -> list[SequencePair]:
    return [
        SequencePair(tuple(encode(src_dict, s)), tuple(encode(tgt_dict, t)), i)
        for i, (s, t) in enumerate(zip(src_sents, tgt_sents))
    ]


@dataclass
class MiniBatch:
    source: np.ndarray  # (B, S) right-padded
    target_in: np.ndarray  # (B, T) bos-prefixed
    target_out: np.ndarray  # (B, T) eos-terminated
    source_lengths: np.ndarray
    target_lengths: np.ndarray
    ntokens: int
    indices: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.indices)

    def cost(self) -> int:
        return batch_cost(self.size, self.source.shape[1], self.target_in.shape[1])

    def source_pad_mask(self) -> np.ndarray:
        return self.source == PAD


def batch_cost(rows: int, src_len: int, tgt_len: int) -> int:
    return rows * max(src_len, tgt_len)


def collate(pairs: Sequence[SequencePair], members: Sequence[int]) -> MiniBatch:
    """Pad the given pair positions into a MiniBatch."""
    chosen = [pairs[m] for m in members]
    B = len(chosen)
    S = max((len(p.source) for p in chosen), default=0)
    T = max((len(p.target) for p in chosen), default=0)
    src = np.full((B, S), PAD, dtype=np.int64)
    tin = np.full((B, T), PAD, dtype=np.int64)
    tout = np.full((B, T), PAD, dtype=np.int64)
    for r, p in enumerate(chosen):
        src[r, : len(p.source)] = p.source
        tout[r, : len(p.target)] = p.target
        tin[r, 0] = BOS
        tin[r, 1 : len(p.target)] = p.target[:-1]
    slen = np.array([len(p.source) for p in chosen], dtype=np.int64)
    tlen = np.array([len(p.target) for p in chosen], dtype=np.int64)
    return MiniBatch(src, tin, tout, slen, tlen, int(tlen.sum()), tuple(p.index for p in chosen))


@dataclass(frozen=True)
class EpochPlan:
    """Fixed batch membership (positions into the pair list) plus shuffle seed."""

    batches: tuple[tuple[int, ...], ...]
    seed: int
    epoch: int = 1

    def __len__(self):
        return len(self.batches)


def _pack(pairs, order, max_tokens, max_sentences) -> list[tuple[int, ...]]:
    batches, cur = [], []
    s_max = t_max = 0
    for pos in order:
        p = pairs[pos]
        s2, t2 = max(s_max, len(p.source)), max(t_max, len(p.target))
        fits = batch_cost(len(cur) + 1, s2, t2) <= max_tokens and (
            not max_sentences or len(cur) + 1 <= max_sentences
        )
        if cur and not fits:
            batches.append(tuple(cur))
            cur, s2, t2 = [], len(p.source), len(p.target)
        cur.append(pos)
        s_max, t_max = s2, t2
        if len(cur) == 1 and batch_cost(1, s_max, t_max) > max_tokens:
            logger.warning(
                "pair %d costs %d > max_tokens=%d; batching it alone",
                p.index,
                batch_cost(1, s_max, t_max),
                max_tokens,
            )
    if cur:
        batches.append(tuple(cur))
    return batches


def make_batches(
    pairs: Sequence[SequencePair],
    max_tokens: int,
    max_sentences: Optional[int] = None,
    seed: int = 1,
    sort: bool = True,
) -> EpochPlan:
    """Group pairs of similar length into batches under a token budget.

    Pairs are sorted by (target length, source length, corpus index) and packed
    greedily; a batch costs rows * max(padded source, padded target) cells.
    ``sort=False`` packs in corpus order instead (the comparison baseline).
    """
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    order = range(len(pairs))
    if sort:
        order = sorted(order, key=lambda i: (len(pairs[i].target), len(pairs[i].source), pairs[i].index))
    return EpochPlan(tuple(_pack(pairs, order, max_tokens, max_sentences)), seed)


def shuffle_epoch(plan: EpochPlan, epoch: int) -> list[tuple[int, ...]]:
    if epoch < 1:
        raise ValueError("epochs are numbered from 1")
    perm = RngStream(plan.seed, stream_id=epoch).permutation(len(plan.batches))
    return [plan.batches[i] for i in perm]


def padding_ratio(pairs: Sequence[SequencePair], plan: EpochPlan) -> float:
    """Pad cells over all cells, counting source and target-output matrices."""
    pad = total = 0
    for members in plan.batches:
        srcs = [len(pairs[m].source) for m in members]
        tgts = [len(pairs[m].target) for m in members]
        cells = len(members) * (max(srcs) + max(tgts))
        total += cells
        pad += cells - sum(srcs) - sum(tgts)
    return pad / total if total else 0.0


class EpochIterator:
    """Endless stream of batches: epoch 1's shuffled order, then epoch 2's, ...

    The cursor (epoch, ordinal) names the next batch to be produced and is all
    a checkpoint needs to resume the stream.
    """

    def __init__(self, plan: EpochPlan, epoch: int = 1, ordinal: int = 0):
        self.plan = plan
        self.epoch = epoch
        self.ordinal = ordinal
        self._order = shuffle_epoch(plan, epoch) if len(plan) else []

    @property
    def cursor(self) -> tuple[int, int]:
        return (self.epoch, self.ordinal)

    @property
    def upcoming_epoch(self) -> int:
        """Epoch of the batch ``next()`` would return."""
        return self.epoch + 1 if self._order and self.ordinal >= len(self._order) else self.epoch

    def next(self) -> tuple[int, ...]:
        if not self._order:
            raise StopIteration("empty epoch plan")
        if self.ordinal >= len(self._order):
            self.epoch += 1
            self.ordinal = 0
            self._order = shuffle_epoch(self.plan, self.epoch)
        members = self._order[self.ordinal]
        self.ordinal += 1
        return members

    def take(self, n: int) -> list[tuple[int, ...]]:
        return [self.next() for _ in range(n)]
