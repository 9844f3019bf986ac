"""
Synchronous training timelines
==============================

A discrete-event view of one update on two replicas: a straggler holding
everyone back, communication overlapped with backward, and local gradient
accumulation evening out per-batch variation.
"""

from pathlib import Path

from seqforge.distributed.timeline import MODES, load_scenario, simulate_timeline

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def draw(report, width=40):
    """One text row per replica plus one for communication; '#' compute, '~' comm."""
    scale = width / report.makespan
    rows = []
    for r, spans in enumerate(report.compute):
        line = [" "] * width
        for start, end in spans:
            for i in range(int(start * scale), int(end * scale)):
                line[i] = "#"
        rows.append(f"replica {r} |{''.join(line)}|")
    line = [" "] * width
    for start, end, _ in report.comm:
        for i in range(int(start * scale), max(int(end * scale), int(start * scale) + 1)):
            line[min(i, width - 1)] = "~"
    rows.append(f"comm      |{''.join(line)}|")
    return "\n".join(rows)


# %% the three committed scenarios
for name in ("straggler", "overlap", "accumulation"):
    sc = load_scenario(SCENARIOS / f"{name}.txt")
    rep = sc.run()
    print(f"{name}: mode={sc.mode} makespan={rep.makespan} idle={rep.idle_time}")
    print(draw(rep))

# %% the accumulation scenario under every mode
compute = [[1.0, 2.0], [2.0, 1.0]]
for mode in MODES:
    print(f"{mode:14s} {simulate_timeline(compute, [0.5], mode).makespan}")
