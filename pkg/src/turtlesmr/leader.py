"""Rotating-leader wrapper helpers.

One processor per instance (rotating round-robin) broadcasts its proposal;
the others wait for it behind a timer that doubles every instance and adopt
it as their own input if it arrives in time and extends the lower bound they
are obliged to respect.  The wrapper only influences which chain a processor
feeds into the wrapped turtle, so it cannot affect safety; under a post-GST
delay bound it removes contention often enough for decisions to keep growing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from .chain import Chain, is_prefix
from .report import PropertyResult

LEADER_ROUND_TAG = 0

# Doubling timers overflow nothing in practice; the cap is unreachable in any
# desk-scale run and exists only to bound the arithmetic.
TIMER_CAP = 1 << 62


@dataclass(frozen=True)
class LeaderConfig:
    enabled: bool = False
    initial_timer: int = 10


def leader_for(instance: int, n: int) -> int:
    """Leader of `instance` is processor instance mod n."""
    if instance < 1:
        raise ValueError(f"instances are numbered from 1, got {instance}")
    return instance % n


def timer_length(instance: int, initial_timer: int) -> int:
    """Per-instance wait for the leader's proposal: initial_timer * 2^(i-1)."""
    if instance < 1:
        raise ValueError(f"instances are numbered from 1, got {instance}")
    return min(initial_timer << (instance - 1), TIMER_CAP)


def choose_input(
    own_proposal: Chain, leader_chain: Chain | None, required_lower: Chain
) -> tuple[Chain, bool]:
    """Pick the turtle input when the leader phase resolves.

    Adopts the leader's chain only if it arrived (not None) and extends the
    processor's required lower bound; blind adoption could hand the turtle an
    input below the upper chain of the previous instance, which the
    composition forbids.  Returns (input chain, adopted flag).
    """
    if leader_chain is not None and is_prefix(required_lower, leader_chain):
        return leader_chain, True
    return own_proposal, False


def check_progress(
    events: Iterable[Mapping],
    *,
    correct: set[int],
    n: int,
    instances: int,
    delta: int,
    gst: int,
    initial_timer: int,
    window: int | None = None,
) -> PropertyResult:
    """Bounded progress check for leader runs under partial synchrony.

    Once timers exceed delta * 2^n and every instance starts after GST has
    settled, each correct processor's longest decided chain must grow
    strictly across every window of 4n instances.  The detail records how
    many windows were actually checked, so a vacuous pass is visible.
    """
    name = "smr-progress"
    events = list(events)
    if window is None:
        window = 4 * n
    threshold = delta * (1 << n)
    first_big_timer = 1
    while timer_length(first_big_timer, initial_timer) <= threshold:
        first_big_timer += 1
    # Instances any correct processor started before gst + delta may still
    # suffer unbounded pre-GST delays; windows begin after them.
    horizon = gst + delta
    last_pre_gst = 0
    for ev in events:
        if (
            ev.get("kind") == "propose"
            and ev.get("proc") in correct
            and ev["t"] < horizon
        ):
            last_pre_gst = max(last_pre_gst, ev["instance"])
    start = max(first_big_timer, last_pre_gst + 1)

    lengths = {p: [0] * (instances + 1) for p in correct}
    for ev in events:
        if ev.get("kind") == "decide" and ev.get("proc") in correct:
            instance = ev["instance"]
            if instance <= instances:
                row = lengths[ev["proc"]]
                row[instance] = max(row[instance], len(ev["chain"]))
    for row in lengths.values():
        for i in range(1, instances + 1):
            row[i] = max(row[i], row[i - 1])

    windows = 0
    for w in range(start, instances - window + 1):
        windows += 1
        for p in sorted(correct):
            if lengths[p][w + window] <= lengths[p][w]:
                return PropertyResult(
                    name,
                    False,
                    f"proc {p}: longest decided chain did not grow across "
                    f"instances ({w}, {w + window}]",
                )
    return PropertyResult(
        name, True, f"{windows} windows of {window} instances checked from {start}"
    )
