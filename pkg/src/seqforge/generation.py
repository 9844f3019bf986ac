"""Search over step-wise model scores.

All searches share one driver. Hypothesis rows of every sentence in a batch
are decoded together; after each step the incremental cache is reordered so
that row i of the cache belongs to active hypothesis i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from seqforge.data import BOS, EOS, PAD, Dictionary
from seqforge.models.transformer import CapacityError
from seqforge.numerics.ops import log_softmax_array
from seqforge.numerics.rng import RngStream, derive_stream_id

NEG_INF = -math.inf


@dataclass(frozen=True)
class GenConfig:
    beam: int = 4
    lenpen: float = 0.6
    max_len: int = 0  # 0 means 2 * source length + 8
    groups: int = 1
    strength: float = 0.5
    k: int = 1
    temperature: float = 1.0
    max_tokens: int = 4096

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.groups < 1 or self.beam % self.groups:
            raise ValueError(f"diverse groups ({self.groups}) must divide the beam ({self.beam})")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.max_len < 0:
            raise ValueError("max_len must be >= 1 (or 0 for the length rule)")
        if self.strength < 0:
            raise ValueError("diversity strength must be >= 0")

    def limit(self, src_len: int, capacity: int) -> int:
        n = self.max_len or 2 * src_len + 8
        return max(1, min(n, capacity))


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    cum: float
    step_logprobs: tuple[float, ...]
    finished: bool = True
    finish_step: int = 0
    group: int = 0
    score: float = 0.0

    def __len__(self):
        return len(self.tokens)


def score_hypothesis(cum_logprob: float, length: int, alpha: float) -> float:
    if length < 1:
        raise ValueError("length must be >= 1")
    return cum_logprob / (length**alpha)


@dataclass
class _Live:
    tokens: tuple
    cum: float
    lps: tuple
    aug: float  # cumulative search score (log-probs minus diversity penalties)


def _content(src: Sequence[int]) -> list[int]:
    ids = [int(t) for t in src]
    return ids[:-1] if ids and ids[-1] == EOS else ids


def _pad_sources(sources: Sequence[Sequence[int]]) -> np.ndarray:
    S = max(len(s) for s in sources)
    out = np.full((len(sources), S), PAD, dtype=np.int64)
    for i, s in enumerate(sources):
        out[i, : len(s)] = s
    return out


def _empty_result() -> list[Hypothesis]:
    return [Hypothesis((EOS,), 0.0, (0.0,), True, 0, 0, 0.0)]


class _Decoder:
    """Row bookkeeping shared by beam and sampling searches."""

    def __init__(self, model, sources, cfg: GenConfig, cache: bool):
        self.model, self.cfg, self.cache = model, cfg, cache
        self.sources = [list(map(int, s)) for s in sources]
        if self.sources and any(s and s[-1] != EOS for s in self.sources):
            self.sources = [s if s and s[-1] == EOS else s + [EOS] for s in self.sources]
        self.live = [i for i, s in enumerate(self.sources) if _content(s)]
        cap = model.cfg.max_positions
        self.max_len = {i: self.cfg.limit(len(self.sources[i]), cap) for i in self.live}
        self.enc = model.forward_encoder(_pad_sources([self.sources[i] for i in self.live])) if self.live else None

    def start(self, parents: Sequence[int]) -> None:
        self.enc_rows = self.enc.select(parents)
        self.state = self.model.init_incremental_state(self.enc_rows) if self.cache else None

    def logits(self, prefixes: Sequence[tuple], step: int) -> np.ndarray:
        if self.cache:
            last = [BOS if step == 0 else p[-1] for p in prefixes]
            logits, self.state = self.model.forward_decoder_step(last, self.enc_rows, self.state)
            logits = logits.data
        else:
            prev = np.array([[BOS, *p] for p in prefixes], dtype=np.int64)
            logits = self.model.forward_decoder_full(prev, self.enc_rows).data[:, -1, :]
        return logits

    def reorder(self, parents: Sequence[int]) -> None:
        parents = np.asarray(parents, dtype=np.int64)
        self.enc_rows = self.enc_rows.select(parents)
        if self.cache:
            self.state = self.model.reorder_incremental_state(self.state, parents)


def _logprobs(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    lp = log_softmax_array(logits / temperature if temperature != 1.0 else logits)
    lp[:, BOS] = NEG_INF
    lp[:, PAD] = NEG_INF
    return lp


def _force_eos(lp: np.ndarray) -> np.ndarray:
    out = np.full_like(lp, NEG_INF)
    out[:, EOS] = lp[:, EOS]
    return out


def _bound(aug: float, max_len: int, alpha: float) -> float:
    """Best normalized score any continuation of a live hypothesis can reach."""
    return aug / (max_len**alpha) if alpha > 0 else aug


def _rank_key(alpha):
    return lambda h: (-score_hypothesis(h[1], len(h[0].tokens), alpha), h[0].finish_step, h[0].tokens)


def diverse_beam_search(
    model, sources: Sequence[Sequence[int]], cfg: GenConfig, *, cache: bool = True, early_stop: bool = True
) -> list[list[Hypothesis]]:
    """n-best lists, one per source, each at most ``cfg.beam`` long.

    The beam is split into ``cfg.groups`` groups of ``beam / groups`` rows.
    Group g's log-probs at step t are lowered by ``strength`` times the
    number of times each token was chosen at step t by groups before g. The
    penalty only steers selection: reported scores are model log-probs.
    """
    G, alpha = cfg.groups, cfg.lenpen
    b = cfg.beam // G
    dec = _Decoder(model, sources, cfg, cache)
    results: list[Optional[list[Hypothesis]]] = [None] * len(dec.sources)
    for i in range(len(dec.sources)):
        if i not in dec.max_len:
            results[i] = _empty_result()
    if not dec.live:
        return results  # type: ignore[return-value]

    active = {s: [[_Live((), 0.0, (), 0.0)] for _ in range(G)] for s in dec.live}
    finished = {s: [[] for _ in range(G)] for s in dec.live}  # (Hypothesis, aug)
    order = list(dec.live)
    dec.start([j for j, s in enumerate(order) for _ in range(G)])
    rows = [(s, g, h) for s in order for g in range(G) for h in active[s][g]]
    step = 0
    while rows:
        lp_all = _logprobs(dec.logits([h.tokens for _, _, h in rows], step))
        parents: list[int] = []
        pos = 0
        for s in order:
            if not any(active[s]):
                continue
            force = step == dec.max_len[s] - 1
            counts = np.zeros(lp_all.shape[1])
            for g in range(G):
                hyps = active[s][g]
                idx = list(range(pos, pos + len(hyps)))
                pos += len(hyps)
                if not hyps:
                    continue
                lp = lp_all[idx]
                if force:
                    lp = _force_eos(lp)
                lpg = lp - cfg.strength * counts if g > 0 and cfg.strength else lp
                aug = np.array([h.aug for h in hyps])[:, None] + lpg
                r_idx, v_idx = np.nonzero(np.isfinite(aug))
                sc = aug[r_idx, v_idx]
                sel = np.lexsort((v_idx, r_idx, -sc))[: 2 * b]
                nxt: list[_Live] = []
                for rank, c in enumerate(sel):
                    r, v = int(r_idx[c]), int(v_idx[c])
                    h = hyps[r]
                    if rank < b:
                        counts[v] += 1
                    lp_rv = float(lp[r, v])
                    toks = h.tokens + (v,)
                    cum, lps, a = h.cum + lp_rv, h.lps + (lp_rv,), h.aug + float(lpg[r, v])
                    if v == EOS:
                        if rank < b:
                            hyp = Hypothesis(toks, cum, lps, True, step, g, score_hypothesis(cum, len(toks), alpha))
                            finished[s][g].append((hyp, a))
                    elif len(nxt) < b:
                        nxt.append(_Live(toks, cum, lps, a))
                        parents.append(idx[r])
                active[s][g] = nxt
            if early_stop and alpha >= 0 and _settled(active[s], finished[s], b, dec.max_len[s], alpha):
                # drop this sentence's rows from the next step
                keep = sum(len(x) for x in active[s])
                if keep:
                    del parents[len(parents) - keep :]
                active[s] = [[] for _ in range(G)]
        rows = [(s, g, h) for s in order for g in range(G) for h in active[s][g]]
        step += 1
        if rows:
            dec.reorder(parents)

    key = _rank_key(alpha)
    for s in order:
        merged = []
        for g in range(G):
            merged.extend(h for h, _ in sorted(finished[s][g], key=key)[:b])
        merged.sort(key=lambda h: (-h.score, h.finish_step, h.group, h.tokens))
        results[s] = merged
    return results  # type: ignore[return-value]


def _settled(active, finished, b, max_len, alpha) -> bool:
    """True when no live hypothesis can displace any group's b-th best finish."""
    for acts, fins in zip(active, finished):
        if not acts:
            continue
        if len(fins) < b:
            return False
        kth = sorted(score_hypothesis(a, len(h.tokens), alpha) for h, a in fins)[-b]
        if kth < max(_bound(h.aug, max_len, alpha) for h in acts):
            return False
    return True


def beam_search(model, sources, cfg: GenConfig, *, cache: bool = True, early_stop: bool = True):
    """Standard beam search: diverse beam search with a single group."""
    if cfg.groups != 1:
        cfg = GenConfig(cfg.beam, cfg.lenpen, cfg.max_len, 1, cfg.strength, cfg.k, cfg.temperature, cfg.max_tokens)
    return diverse_beam_search(model, sources, cfg, cache=cache, early_stop=early_stop)


def top_k_sample(
    model, sources, cfg: GenConfig, rng: RngStream, ids: Optional[Sequence[int]] = None, *, cache: bool = True
) -> list[list[Hypothesis]]:
    """One sampled hypothesis per source.

    Sentence ``ids[i]`` (default: i) draws from its own stream derived from
    ``rng``'s seed and stream id, so a sample does not depend on which other
    sentences share its batch. Each step takes one uniform per live row.
    """
    ids = list(range(len(sources))) if ids is None else list(ids)
    dec = _Decoder(model, sources, cfg, cache)
    results: list = [None] * len(dec.sources)
    for i in range(len(dec.sources)):
        if i not in dec.max_len:
            results[i] = _empty_result()
    if not dec.live:
        return results
    streams = {s: RngStream(rng.seed, derive_stream_id(rng.stream_id, ids[s])) for s in dec.live}
    live = {s: _Live((), 0.0, (), 0.0) for s in dec.live}
    dec.start(list(range(len(dec.live))))
    order = list(dec.live)
    step = 0
    while order:
        prefixes = [live[s].tokens for s in order]
        logits = dec.logits(prefixes, step)
        lp_true = _logprobs(logits)
        lp_t = _logprobs(logits, cfg.temperature) if cfg.temperature != 1.0 else lp_true
        parents, nxt = [], []
        for j, s in enumerate(order):
            row_t, row = lp_t[j], lp_true[j]
            if step == dec.max_len[s] - 1:
                row_t, row = _force_eos(row_t[None])[0], _force_eos(row[None])[0]
            v = _draw(row_t, cfg.k, float(streams[s].uniform(1)[0]))
            h = live[s]
            lpv = float(row[v])
            toks = h.tokens + (v,)
            cum = h.cum + lpv
            if v == EOS:
                results[s] = [Hypothesis(toks, cum, h.lps + (lpv,), True, step, 0, score_hypothesis(cum, len(toks), cfg.lenpen))]
            else:
                live[s] = _Live(toks, cum, h.lps + (lpv,), cum)
                parents.append(j)
                nxt.append(s)
        order = nxt
        step += 1
        if order:
            dec.reorder(parents)
    return results


def _draw(lp: np.ndarray, k: int, u: float) -> int:
    """Inverse-CDF draw among the k best finite entries of one log-prob row."""
    cand = np.argsort(-lp, kind="stable")[:k]
    cand = cand[np.isfinite(lp[cand])]
    w = lp[cand] - lp[cand[0]]
    p = np.exp(w)
    z = 0.0
    for x in p:
        z += float(x)
    acc = 0.0
    for c, x in zip(cand, p):
        acc += float(x) / z
        if u < acc:
            return int(c)
    return int(cand[-1])


# -- inference batching -------------------------------------------------------


def batch_for_inference(lengths: Sequence[int], max_tokens: int) -> list[list[int]]:
    """Input indices grouped into batches, longest sources first.

    A batch's cost is rows times its longest source; no batch exceeds
    ``max_tokens``. Every index appears exactly once.
    """
    for i, n in enumerate(lengths):
        if n > max_tokens:
            raise CapacityError(f"line {i + 1}: {n} source tokens exceed max_tokens={max_tokens}")
    order = sorted(range(len(lengths)), key=lambda i: (-lengths[i], i))
    batches: list[list[int]] = []
    cur: list[int] = []
    width = 0
    for i in order:
        w = max(width, lengths[i])
        if cur and (len(cur) + 1) * w > max_tokens:
            batches.append(cur)
            cur, w = [], lengths[i]
        cur.append(i)
        width = w
    if cur:
        batches.append(cur)
    return batches


SEARCHES = ("beam", "diverse", "sample")


def generate(
    model,
    sources: Sequence[Sequence[int]],
    cfg: GenConfig,
    search: str = "beam",
    rng: Optional[RngStream] = None,
    *,
    cache: bool = True,
) -> list[list[Hypothesis]]:
    """Batch ``sources`` under ``cfg.max_tokens`` and decode; results follow input order."""
    if search not in SEARCHES:
        raise ValueError(f"unknown search {search!r}; choose from {SEARCHES}")
    sources = [list(s) for s in sources]
    out: list = [None] * len(sources)
    for members in batch_for_inference([len(s) for s in sources], cfg.max_tokens):
        batch = [sources[i] for i in members]
        if search == "sample":
            res = top_k_sample(model, batch, cfg, rng or RngStream(0), ids=members, cache=cache)
        elif search == "diverse":
            res = diverse_beam_search(model, batch, cfg, cache=cache)
        else:
            res = beam_search(model, batch, cfg, cache=cache)
        for i, r in zip(members, res):
            out[i] = r
    return out


def format_hypothesis(index: int, hyp: Hypothesis, tgt_dict: Dictionary) -> str:
    return f"{index}\t{hyp.score:.6f}\t{tgt_dict.string(hyp.tokens)}"
