"""
Beam, diverse beam and sampling
===============================

All three searches share one decoder loop over the incremental cache. On an
untrained model the outputs are noise, which makes the differences between
the strategies easy to see.
"""

import numpy as np

from seqforge.data import EOS
from seqforge.generation import GenConfig, beam_search, diverse_beam_search, top_k_sample
from seqforge.numerics import RngStream
from seqforge.registry import REGISTRY

cfg = REGISTRY.resolve_architecture("tiny_transformer")
model = REGISTRY.instantiate("model", "transformer", cfg, src_vocab=10, tgt_vocab=10, seed=7)
src = [[4, 5, 6, 7, EOS]]

# %% a 4-best list, with and without the length penalty
for alpha in (0.0, 1.0):
    for h in beam_search(model, src, GenConfig(beam=4, lenpen=alpha, max_len=6))[0]:
        print(f"alpha={alpha}  {h.tokens}  cum={h.cum:.3f}  score={h.score:.3f}")

# %% two groups with a strong diversity penalty start differently
for h in diverse_beam_search(model, src, GenConfig(beam=4, groups=2, strength=5.0, max_len=6))[0]:
    print(f"group {h.group}  {h.tokens}  cum={h.cum:.3f}")

# %% top-k sampling draws from per-sentence streams, so reruns repeat exactly
draws = [top_k_sample(model, src, GenConfig(k=4, max_len=6), RngStream(seed))[0][0].tokens for seed in range(5)]
print(draws)
print(draws[0] == top_k_sample(model, src, GenConfig(k=4, max_len=6), RngStream(0))[0][0].tokens)

# %% the cache-free path recomputes every prefix and agrees token for token
a = beam_search(model, src, GenConfig(beam=4, max_len=6))
b = beam_search(model, src, GenConfig(beam=4, max_len=6), cache=False)
print(all(np.array_equal(x.tokens, y.tokens) for x, y in zip(a[0], b[0])))
