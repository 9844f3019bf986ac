"""Event timeline of synchronous data-parallel steps.

Three schedules are modeled for W replicas each processing A sub-batches:

``serial_sync``
    reduce all buckets after every sub-batch, once every replica is done.
``overlap``
    reduce after every sub-batch, but bucket b may start as soon as every
    replica has produced it; one shared channel serves buckets in order.
``overlap_accum``
    run the A sub-batches back to back and reduce only the last one's
    buckets, overlapped as above.

Bucket b of a sub-batch with duration c becomes available at
``start + c * fractions[b]`` (cumulative fractions, evenly spread by default).
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

MODES = ("serial_sync", "overlap", "overlap_accum")

Span = tuple[float, float]


@dataclass
class TimelineReport:
    mode: str
    compute: list[list[Span]]
    comm: list[tuple[float, float, int]]  # (start, end, bucket)
    idle: list[list[Span]]
    makespan: float
    exposed_comm: float
    idle_time: list[float] = field(default_factory=list)

    @property
    def total_idle(self) -> float:
        return sum(self.idle_time)

    @property
    def total_compute(self) -> float:
        return sum(e - s for spans in self.compute for s, e in spans)

    def to_text(self) -> str:
        lines = [f"mode = {self.mode}", f"makespan = {self.makespan:g}", f"exposed_comm = {self.exposed_comm:g}"]
        lines += [f"idle[{r}] = {t:g}" for r, t in enumerate(self.idle_time)]
        lines.append(f"total_idle = {self.total_idle:g}")
        return "\n".join(lines) + "\n"


def _union(spans: Sequence[Span]) -> list[Span]:
    out: list[list[float]] = []
    for s, e in sorted(spans):
        if e <= s:
            continue
        if out and s <= out[-1][1]:
            out[-1][1] = max(out[-1][1], e)
        else:
            out.append([s, e])
    return [(s, e) for s, e in out]


def _measure(spans: Sequence[Span]) -> float:
    return sum(e - s for s, e in _union(spans))


def _gaps(busy: Sequence[Span], horizon: float) -> list[Span]:
    gaps, t = [], 0.0
    for s, e in _union(busy):
        if s > t:
            gaps.append((t, s))
        t = max(t, e)
    if horizon > t:
        gaps.append((t, horizon))
    return gaps


def _intersect_measure(a: Sequence[Span], b: Sequence[Span]) -> float:
    total = 0.0
    for s1, e1 in _union(a):
        for s2, e2 in _union(b):
            total += max(0.0, min(e1, e2) - max(s1, s2))
    return total


def simulate_timeline(
    compute: Sequence[Sequence[float]],
    comm: Sequence[float],
    mode: str,
    fractions: Optional[Sequence[float]] = None,
) -> TimelineReport:
    """``compute[r][a]``: duration of replica r's a-th sub-batch; ``comm[b]``: bucket b's reduction time."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    W = len(compute)
    A = len(compute[0]) if W else 0
    if any(len(row) != A for row in compute):
        raise ValueError("every replica needs the same number of sub-batches")
    if any(c <= 0 for row in compute for c in row) or any(c <= 0 for c in comm):
        raise ValueError("durations must be positive")
    nb = len(comm)
    if fractions is None:
        fractions = [(b + 1) / nb for b in range(nb)]
    if len(fractions) != nb:
        raise ValueError("need one completion fraction per bucket")

    spans: list[list[Span]] = [[] for _ in range(W)]
    comm_spans: list[tuple[float, float, int]] = []
    channel = 0.0

    def reduce(ready_times):
        nonlocal channel
        for b in range(nb):
            start = max(ready_times[b], channel)
            channel = start + comm[b]
            comm_spans.append((start, channel, b))
        return channel

    if mode == "overlap_accum":
        ends, last_starts = [], []
        for r in range(W):
            t = start = 0.0
            for a in range(A):
                start = t
                spans[r].append((start, start + compute[r][a]))
                t = start + compute[r][a]
            ends.append(t)
            last_starts.append(start)
        ready = [max(last_starts[r] + compute[r][A - 1] * fractions[b] for r in range(W)) for b in range(nb)]
        makespan = max(max(ends), reduce(ready))
    else:
        t = 0.0
        for a in range(A):
            for r in range(W):
                spans[r].append((t, t + compute[r][a]))
            finish = max(t + compute[r][a] for r in range(W))
            if mode == "serial_sync":
                ready = [finish] * nb
            else:
                ready = [max(t + compute[r][a] * fractions[b] for r in range(W)) for b in range(nb)]
            channel = max(channel, t)
            t = max(finish, reduce(ready))
        makespan = t

    comm_only = [(s, e) for s, e, _ in comm_spans]
    idle = [_gaps(spans[r] + comm_only, makespan) for r in range(W)]
    all_compute = [s for row in spans for s in row]
    exposed = _measure(comm_only) - _intersect_measure(comm_only, all_compute)
    return TimelineReport(
        mode, spans, comm_spans, idle, makespan, exposed, [sum(e - s for s, e in g) for g in idle]
    )


@dataclass
class Scenario:
    compute: list[list[float]]
    comm: list[float]
    mode: str
    fractions: Optional[list[float]] = None

    @property
    def workers(self) -> int:
        return len(self.compute)

    @property
    def accum(self) -> int:
        return len(self.compute[0])

    def run(self, mode: Optional[str] = None) -> TimelineReport:
        return simulate_timeline(self.compute, self.comm, mode or self.mode, self.fractions)


def parse_scenario(text: str) -> Scenario:
    """Read ``key = value`` lines: workers, accum, compute.<r>, comm, mode, fractions."""
    fields: dict[str, str] = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed scenario line: {raw!r}")
        k, v = line.split("=", 1)
        fields[k.strip()] = v.strip()
    W, A = int(fields["workers"]), int(fields["accum"])
    compute = []
    for r in range(W):
        row = [float(x) for x in fields[f"compute.{r}"].split()]
        if len(row) != A:
            raise ValueError(f"compute.{r} lists {len(row)} durations, expected accum={A}")
        compute.append(row)
    fractions = [float(x) for x in fields["fractions"].split()] if "fractions" in fields else None
    return Scenario(compute, [float(x) for x in fields["comm"].split()], fields.get("mode", "serial_sync"), fractions)


def load_scenario(path) -> Scenario:
    return parse_scenario(Path(path).read_text(encoding="utf-8"))


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        print("usage: python -m seqforge.distributed.timeline SCENARIO [MODE]", file=sys.stderr)
        return 1
    sc = load_scenario(argv[0])
    sys.stdout.write(sc.run(argv[1] if len(argv) > 1 else None).to_text())
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
