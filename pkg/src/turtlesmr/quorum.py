"""Threshold quorum systems with k-wise intersection guarantees.

A quorum is a processor subset large enough that waiting for it cannot block
on crashed processors.  The threshold construction makes every subset of size
at least n - f a quorum; it satisfies k-intersection (any k quorums share a
processor) whenever n > k * f.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterable, Iterator

ProcessorId = int

VERIFY_MAX_N = 12


class QuorumConfigError(ValueError):
    """A quorum system was requested with unsatisfiable parameters."""


class QuorumCapacityError(ValueError):
    """An exhaustive check was requested beyond its enumeration guard."""


@dataclass(frozen=True)
class QuorumSystem:
    """Threshold quorum system over processors 0..n-1.

    `kind` exists so non-threshold systems can be added behind the same
    surface; only "threshold" is implemented.
    """

    n: int
    f: int
    k: int
    kind: str = "threshold"

    @property
    def quorum_size(self) -> int:
        return self.n - self.f

    def _check_members(self, members: Iterable[ProcessorId]) -> frozenset[ProcessorId]:
        s = frozenset(members)
        for pid in s:
            if not 0 <= pid < self.n:
                raise ValueError(f"processor id {pid} out of range [0, {self.n})")
        return s

    def is_quorum(self, members: Iterable[ProcessorId]) -> bool:
        return len(self._check_members(members)) >= self.quorum_size

    def minimal_quorums(self) -> Iterator[frozenset[ProcessorId]]:
        """All quorums of size exactly n - f.

        Every quantity derived from quorum intersections is extremal on the
        minimal quorums (supersets only grow intersections), so enumeration
        APIs expose only these.
        """
        for combo in itertools.combinations(range(self.n), self.quorum_size):
            yield frozenset(combo)

    def min_intersection_size(self, count: int) -> int:
        """Worst-case size of an intersection of `count` quorums."""
        return max(0, self.n - count * self.f)

    def contains_quorum(self, members: Iterable[ProcessorId]) -> bool:
        """True iff some quorum lies inside `members`."""
        return self.is_quorum(members)


def make_threshold(n: int, f: int, k: int) -> QuorumSystem:
    """Build the threshold system; requires n > k * f, f >= 0, k >= 1."""
    if n < 1:
        raise QuorumConfigError(f"need at least one processor, got n={n}")
    if f < 0:
        raise QuorumConfigError(f"fault bound must be non-negative, got f={f}")
    if k < 1:
        raise QuorumConfigError(f"intersection degree must be >= 1, got k={k}")
    if n <= k * f:
        raise QuorumConfigError(
            f"threshold construction needs n > k*f; got n={n}, k={k}, f={f}"
        )
    return QuorumSystem(n=n, f=f, k=k)


def verify_k_intersection(system: QuorumSystem, k: int) -> bool:
    """Exhaustively check that every k of the system's quorums intersect.

    Searches all multisets of k minimal quorums for an empty intersection
    (checking minimal quorums suffices: any quorum contains a minimal one).
    Guarded to n <= VERIFY_MAX_N.
    """
    if system.n > VERIFY_MAX_N:
        raise QuorumCapacityError(
            f"exhaustive intersection check limited to n <= {VERIFY_MAX_N}, got n={system.n}"
        )
    if k < 1:
        raise ValueError(f"intersection degree must be >= 1, got k={k}")
    masks = [
        sum(1 << pid for pid in q) for q in system.minimal_quorums()
    ]
    full = (1 << system.n) - 1
    f = system.f

    def search(mask: int, start: int, remaining: int) -> bool:
        if mask == 0:
            return True
        if remaining == 0:
            return False
        # Each further quorum removes at most f processors from the
        # intersection, so deeper search is futile once that cannot reach 0.
        if f == 0 or mask.bit_count() > remaining * f:
            return False
        for idx in range(start, len(masks)):
            narrowed = mask & masks[idx]
            if narrowed == mask:
                continue  # no progress; a repeat can never help
            if search(narrowed, idx, remaining - 1):
                return True
        return False

    return not search(full, 0, k)
