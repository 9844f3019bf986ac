import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from seqforge.registry import REGISTRY
from seqforge.numerics.half import DType
from seqforge.tasks import TranslationTask
from seqforge.toy import copy_corpus

settings.register_profile(
    "seqforge", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("seqforge")

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def tiny_model(src_vocab=12, tgt_vocab=12, seed=1, dtype=DType.FP32, **overrides):
    cfg = REGISTRY.resolve_architecture("tiny_transformer", overrides)
    return REGISTRY.instantiate("model", "transformer", cfg, src_vocab=src_vocab, tgt_vocab=tgt_vocab,
                                seed=seed, dtype=dtype)


def small_task(n=40, vocab=8, seed=3, max_tokens=128, **kw):
    src, tgt = copy_corpus(n, vocab=vocab, min_len=2, max_len=6, seed=seed)
    vs, vt = copy_corpus(10, vocab=vocab, min_len=2, max_len=6, seed=seed, split=1)
    return TranslationTask.from_sentences(src, tgt, vs, vt, max_tokens=max_tokens, seed=1, **kw)


def model_loss(seed, dtype):
    """(f, theta) for the cross-entropy of a 1-layer toy model on a fixed 4-pair batch."""
    from seqforge.criterions import CrossEntropy
    from seqforge.numerics import Tape

    src, tgt = copy_corpus(4, vocab=6, min_len=2, max_len=4, seed=1)
    task = TranslationTask.from_sentences(src, tgt)
    batch = task.collate(list(range(4)))
    m = tiny_model(len(task.src_dict), len(task.tgt_dict), seed=seed, dtype=dtype, d_model=8, d_ffn=16)
    crit = CrossEntropy()

    def f(theta):
        m.load_flat(theta)
        with Tape() as tape:
            out = crit(m, batch)
        return out.loss.item(), m.backward(tape, out.loss)

    return f, m.flat()


@pytest.fixture
def task():
    return small_task()


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
