"""Seeded toy corpora for desk-scale experiments."""

from __future__ import annotations

from pathlib import Path

from seqforge.numerics.rng import RngStream, derive_stream_id


def copy_corpus(n: int, vocab: int = 16, min_len: int = 3, max_len: int = 10, seed: int = 0, split: int = 0):
    """``n`` random sentences over ``vocab`` symbols; the target is the source."""
    rng = RngStream(seed, derive_stream_id(0xC0B1, split))
    symbols = [f"w{i}" for i in range(vocab)]
    lengths = min_len + (rng.uniform(n) * (max_len - min_len + 1)).astype(int)
    sents = []
    for L in lengths:
        ids = (rng.uniform(int(L)) * vocab).astype(int)
        sents.append([symbols[i] for i in ids])
    return sents, [list(s) for s in sents]


def write_copy_dataset(out_dir, n_train=2000, n_valid=200, vocab=16, min_len=3, max_len=10, seed=0) -> Path:
    """Write train/valid parallel files for the copy task into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, n, k in (("train", n_train, 0), ("valid", n_valid, 1)):
        src, tgt = copy_corpus(n, vocab, min_len, max_len, seed, k)
        (out / f"{split}.src").write_text("".join(" ".join(s) + "\n" for s in src), encoding="utf-8")
        (out / f"{split}.tgt").write_text("".join(" ".join(t) + "\n" for t in tgt), encoding="utf-8")
    return out
