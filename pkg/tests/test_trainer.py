from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import small_task, tiny_model
from seqforge.criterions import CriterionOutput, CrossEntropy
from seqforge.distributed.buckets import all_reduce, bucket_gradients, reduce_bucket
from seqforge.distributed.scaler import DivergenceError, LossScaler, loss_scaler_update
from seqforge.distributed.timeline import MODES, load_scenario, main as timeline_main, simulate_timeline
from seqforge.distributed.trainer import Trainer, split_rows
from seqforge.numerics import Tape, ops
from seqforge.numerics.half import DType, quantize_fp16, quantize_fp32, round_to
from seqforge.numerics.tensor import Tensor
from seqforge.optim import SGD, Adam, OptimizerState, ScheduleConfig, Scheduler, adam_step, inverse_sqrt_lr

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


# -- buckets -------------------------------------------------------------------------


def test_bucket_example():
    bs = bucket_gradients([4, 4, 4], 8)
    assert [b.params for b in bs] == [(2, 1), (0,)]
    assert [(b.start, b.end) for b in bs] == [(4, 12), (0, 4)]


def test_bucket_threshold_extremes():
    assert [b.params for b in bucket_gradients([3, 5, 2], 100)] == [(2, 1, 0)]
    assert [b.params for b in bucket_gradients([3, 5, 2], 1)] == [(2,), (1,), (0,)]
    with pytest.raises(ValueError):
        bucket_gradients([1], 0)


@given(st.lists(st.integers(1, 50), min_size=1, max_size=20), st.integers(1, 200))
def test_buckets_partition_the_vector(sizes, threshold):
    bs = bucket_gradients(sizes, threshold)
    spans = sorted((b.start, b.end) for b in bs)
    assert spans[0][0] == 0 and spans[-1][1] == sum(sizes)
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:]))
    assert [p for b in bs for p in b.params] == list(reversed(range(len(sizes))))
    assert all(b.size >= threshold for b in bs[:-1])


def _filled(world, vectors, order):
    bs = bucket_gradients([2, 3], 2)
    for r in order:
        for b in bs:
            b.fill(r, vectors[r])
    return all_reduce(bs, world, 5)


def test_all_reduce_examples():
    v = np.arange(5.0)
    assert np.array_equal(_filled(1, [v], [0]), v)
    consts = [np.full(5, c) for c in (1.0, 2.0, 3.0)]
    assert np.array_equal(_filled(3, consts, [0, 1, 2]), np.full(5, 6.0))


def test_all_reduce_ignores_completion_order(rng):
    vs = [rng.normal(size=5) * 10.0 ** rng.integers(-3, 3) for _ in range(4)]
    ref = _filled(4, vs, [0, 1, 2, 3])
    for order in ([3, 2, 1, 0], [1, 3, 0, 2]):
        assert _filled(4, vs, order).tobytes() == ref.tobytes()


def test_all_reduce_requires_every_replica():
    bs = bucket_gradients([2], 1)
    bs[0].fill(0, np.ones(2))
    with pytest.raises(RuntimeError, match="missing replicas"):
        all_reduce(bs, 2, 2)


def test_reduce_bucket_rounds_in_half_precision():
    out = reduce_bucket([np.array([1.0]), np.array([2.0**-12])], DType.FP16E)
    assert out[0] == 1.0


# -- loss scaler -------------------------------------------------------------------


def test_scaler_examples():
    assert LossScaler(128.0).update(True).scale == 64.0
    s = LossScaler(128.0, window=4)
    for _ in range(4):
        loss_scaler_update(s, False)
    assert s.scale == 256.0 and s.counter == 0
    with pytest.raises(DivergenceError):
        LossScaler(2.0**-5, min_scale=2.0**-5).update(True)


def test_scaler_caps_and_resets():
    s = LossScaler(2.0**15, window=1)
    s.update(False)
    assert s.scale == 2.0**15
    s = LossScaler(8.0, window=3)
    s.update(False)
    s.update(False)
    s.update(True)
    assert s.counter == 0 and s.scale == 4.0 and s.overflows == 1


def test_scaler_requires_powers_of_two():
    with pytest.raises(ValueError):
        LossScaler(100.0)
    with pytest.raises(ValueError):
        LossScaler(2.0**16)


# -- training steps -------------------------------------------------------------------


class Recorder:
    """Optimizer stand-in that stores the gradient it is handed."""

    name = "recorder"

    def __init__(self):
        self.grads = []

    def step(self, params, grads, lr):
        self.grads.append(grads.copy())
        return params

    def state_dict(self):
        return {"t": len(self.grads)}

    def load_state_dict(self, d):
        pass


def make_trainer(task, workers=1, accum=1, optimizer=None, fp16=False, scaler=None, seed=1, **kw):
    m = tiny_model(len(task.src_dict), len(task.tgt_dict), seed=seed)
    opt = optimizer or Adam(m.num_params())
    sched = Scheduler(ScheduleConfig(base_lr=0.01, warmup=5))
    return Trainer(m, CrossEntropy(), opt, sched, workers=workers, accum=accum, fp16=fp16, scaler=scaler, **kw)


def test_single_worker_matches_reference_loop(task):
    batches = [task.collate(b) for b in task.plan().batches]
    tr = make_trainer(task)
    for b in batches:
        tr.train_step([[b]])

    ref = tiny_model(len(task.src_dict), len(task.tgt_dict), seed=1)
    master = quantize_fp32(ref.flat())
    state = OptimizerState.zeros(master.size, beta1=0.9, beta2=0.98, eps=1e-8)
    cfg = ScheduleConfig(base_lr=0.01, warmup=5)
    for k, b in enumerate(batches, 1):
        ref.load_flat(master)
        with Tape() as tape:
            out = CrossEntropy()(ref, b)
        g = quantize_fp32(ref.backward(tape, out.loss) / out.ntokens)
        master, state = adam_step(master, g, state, inverse_sqrt_lr(k, cfg))
    assert tr.master.tobytes() == master.tobytes()
    assert tr.replicas_in_sync()


def _reduced_gradient(task, members, W, A):
    rec = Recorder()
    tr = make_trainer(task, W, A, optimizer=rec)
    groups = split_rows(members, W * A)
    tr.train_step([[task.collate(groups[r * A + a]) for a in range(A)] for r in range(W)])
    return rec.grads[0]


def test_two_by_two_matches_concatenated_batch(task):
    members = list(task.plan().batches[0])
    g11 = _reduced_gradient(task, members, 1, 1)
    g22 = _reduced_gradient(task, members, 2, 2)
    assert np.abs(g22 - g11).max() <= 1e-6 * np.abs(g11).max()


def test_accumulation_and_replicas_fold_identically(task):
    members = list(task.plan().batches[0])
    assert _reduced_gradient(task, members, 1, 4).tobytes() == _reduced_gradient(task, members, 4, 1).tobytes()


def test_threads_are_bitwise_equal_to_sequential(task):
    subs = [[task.collate(b)] for b in task.plan().batches[:2]]
    a, b = make_trainer(task, 2), make_trainer(task, 2, threads=True)
    for _ in range(2):
        a.train_step(subs)
        b.train_step(subs)
    assert a.master.tobytes() == b.master.tobytes()


def test_wrong_sub_batch_shape_rejected(task):
    tr = make_trainer(task, 2, 1)
    with pytest.raises(ValueError):
        tr.train_step([[task.collate(task.plan().batches[0])]])


def test_overflow_skips_the_whole_step(task):
    tr = make_trainer(task, 2, 1, fp16=True, scaler=LossScaler(2.0**7))
    subs = [[task.collate(b)] for b in task.plan().batches[:2]]
    tr.train_step(subs)
    before = (tr.master.copy(), tr.optimizer.state.m.copy(), tr.optimizer.state.v.copy(),
              tr.optimizer.state.t, tr.scheduler.num_updates, tr.scaler.scale)

    def poison(r, g):
        if r == 1:
            g = g.copy()
            g[3] = np.inf
        return g

    log = tr.train_step(subs, grad_hook=poison)
    assert log.skipped and log.overflow
    assert tr.master.tobytes() == before[0].tobytes()
    assert tr.optimizer.state.m.tobytes() == before[1].tobytes()
    assert tr.optimizer.state.v.tobytes() == before[2].tobytes()
    assert (tr.optimizer.state.t, tr.scheduler.num_updates) == before[3:5]
    assert tr.scaler.scale == before[5] / 2
    assert tr.step == 2
    assert tr.replicas_in_sync()


def test_repeated_overflow_diverges(task):
    tr = make_trainer(task, fp16=True, scaler=LossScaler(2.0**-4, min_scale=2.0**-5))
    subs = [[task.collate(task.plan().batches[0])]]
    inf = lambda r, g: np.full_like(g, np.inf)  # noqa: E731
    tr.train_step(subs, grad_hook=inf)
    with pytest.raises(DivergenceError):
        tr.train_step(subs, grad_hook=inf)


def test_fp16_master_and_shadow_differ_by_the_rounding_residual(task):
    tr = make_trainer(task, fp16=True)
    tr.train_step([[task.collate(task.plan().batches[0])]])
    shadow = tr.model.flat()
    assert shadow.tobytes() == quantize_fp16(tr.master).tobytes()
    residual = tr.master - shadow
    assert np.any(residual != 0)
    assert np.array_equal(shadow + residual, tr.master)


def test_fp16_loss_close_to_fp32_at_unit_scale(task):
    batch = task.collate(task.plan().batches[0])
    m32 = tiny_model(len(task.src_dict), len(task.tgt_dict))
    m16 = m32.clone(DType.FP16E)
    l32 = CrossEntropy()(m32, batch).loss.item()
    l16 = CrossEntropy()(m16, batch).loss.item()
    assert abs(l16 - l32) <= 1e-2 * abs(l32)


class TinyGradModel:
    """One parameter vector w; the loss is sum((w * x) * x) for a fixed small x."""

    def __init__(self, x, dtype=DType.FP32):
        self.x = np.asarray(x, dtype=np.float64)
        self.dtype = dtype
        self.w = Tensor(np.zeros_like(self.x), dtype)
        self.training, self.dropout_key = False, None

    def flat(self):
        return self.w.data.copy()

    def sizes(self):
        return [self.w.data.size]

    def load_flat(self, v):
        self.w = Tensor(round_to(self.dtype, v), self.dtype)

    def clone(self, dtype):
        c = TinyGradModel(self.x, dtype)
        c.load_flat(self.w.data)
        return c

    def backward(self, tape, loss, seed=1.0):
        grads, _ = tape.backward(loss, seed, [self.w])
        return grads.get(id(self.w), np.zeros_like(self.x))


def tiny_grad_criterion(model, batch):
    x = Tensor(model.x, model.dtype)
    loss = ops.sum_all(ops.mul(ops.mul(model.w, x), x))
    return CriterionOutput(loss, 1)


def test_tiny_gradients_survive_with_loss_scaling():
    # x is representable in half precision but the gradient x * x is not
    x = np.full(4, 1e-4)
    assert quantize_fp16(1e-4) != 0.0 and quantize_fp16(1e-8) == 0.0
    moved = {}
    for scale in (1.0, 2.0**10):
        tr = Trainer(TinyGradModel(x), tiny_grad_criterion, SGD(4), Scheduler(ScheduleConfig("fixed", 1.0, 0)),
                     fp16=True, scaler=LossScaler(scale, min_scale=1.0))
        before = tr.master.copy()
        tr.train_step([[None]])
        moved[scale] = tr.master - before
    assert np.all(moved[1.0] == 0.0)
    assert np.all(moved[2.0**10] != 0.0)
    np.testing.assert_allclose(moved[2.0**10], -quantize_fp16(x) ** 2, rtol=1e-2)


def test_normalization_invariant(task):
    """Doubling every sub-batch loss and token count leaves the update unchanged."""

    def doubled(model, batch):
        out = CrossEntropy()(model, batch)
        return CriterionOutput(ops.scale(out.loss, 2.0), 2 * out.ntokens, out.logging)

    subs = [[task.collate(b)] for b in task.plan().batches[:2]]
    a = make_trainer(task, 2)
    b = make_trainer(task, 2)
    b.criterion = doubled
    for _ in range(3):
        a.train_step(subs)
        b.train_step(subs)
    assert a.master.tobytes() == b.master.tobytes()


def test_split_rows():
    assert split_rows([1, 2, 3, 4, 5], 2) == [[1, 2], [3, 4, 5]]
    with pytest.raises(ValueError):
        split_rows([1], 2)


def test_bucket_completion_order_is_recorded(task):
    tr = make_trainer(task, 2, bucket_threshold=64)
    tr.train_step([[task.collate(b)] for b in task.plan().batches[:2]])
    assert len(tr.buckets) > 1
    for order in tr.last_bucket_order:
        assert sorted(order) == list(range(len(tr.buckets)))
        assert order[0] == 0  # the last parameters finish first


# -- timeline simulator --------------------------------------------------------------


def test_serial_sync_straggler():
    r = simulate_timeline([[1.0], [2.0]], [0.5], "serial_sync")
    assert r.makespan == 2.5
    assert r.idle_time == [1.0, 0.0]
    assert r.exposed_comm == 0.5


def test_overlap_two_buckets():
    r = simulate_timeline([[1.0], [2.0]], [0.25, 0.25], "overlap", fractions=[0.5, 1.0])
    assert [s for s, _, _ in r.comm] == [1.0, 2.0]
    assert r.makespan == 2.25


def test_overlap_accum_versus_serial():
    compute = [[1.0, 2.0], [2.0, 1.0]]
    assert simulate_timeline(compute, [0.5], "serial_sync").makespan == 5.0
    assert simulate_timeline(compute, [0.5], "overlap_accum").makespan == 3.5


@pytest.mark.parametrize(
    "name, mode, makespan",
    [("straggler", "serial_sync", 2.5), ("overlap", "overlap", 2.25),
     ("accumulation", "overlap_accum", 3.5), ("accumulation", "serial_sync", 5.0)],
)
def test_committed_scenarios(name, mode, makespan):
    sc = load_scenario(SCENARIOS / f"{name}.txt")
    assert sc.run(mode).makespan == makespan


def test_timeline_module_entry_point(capsys):
    assert timeline_main([str(SCENARIOS / "straggler.txt")]) == 0
    out = capsys.readouterr().out
    assert "makespan = 2.5" in out and "idle[0] = 1" in out
    assert timeline_main([]) == 1


def test_timeline_rejects_bad_input():
    with pytest.raises(ValueError):
        simulate_timeline([[1.0]], [0.5], "async")
    with pytest.raises(ValueError):
        simulate_timeline([[1.0], [1.0, 2.0]], [0.5], "overlap")
    with pytest.raises(ValueError):
        simulate_timeline([[0.0]], [0.5], "overlap")


durations = st.floats(0.1, 10.0, allow_nan=False)


@given(
    st.integers(1, 4).flatmap(
        lambda W: st.tuples(
            st.integers(1, 3).flatmap(lambda A: st.lists(st.lists(durations, min_size=A, max_size=A), min_size=W, max_size=W)),
            st.lists(durations, min_size=1, max_size=4),
        )
    )
)
def test_simulator_sanity(args):
    compute, comm = args
    reports = {m: simulate_timeline(compute, comm, m) for m in MODES}
    assert reports["overlap"].makespan <= reports["serial_sync"].makespan + 1e-9
    totals = {round(r.total_compute, 9) for r in reports.values()}
    assert len(totals) == 1
    for r in reports.values():
        ends = [e for row in r.compute for _, e in row] + [e for _, e, _ in r.comm]
        assert r.makespan == pytest.approx(max(ends))
        for row in r.compute:
            assert all(a[1] <= b[0] + 1e-12 for a, b in zip(row, row[1:]))
        comm_spans = sorted((s, e) for s, e, _ in r.comm)
        assert all(a[1] <= b[0] + 1e-12 for a, b in zip(comm_spans, comm_spans[1:]))
