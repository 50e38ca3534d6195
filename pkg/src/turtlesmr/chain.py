"""Chains of commands under the prefix order.

A chain is an immutable, possibly empty sequence of commands.  Chains form a
meet-semilattice: the empty chain is the unique bottom element, ``is_prefix``
is the partial order, and ``meet`` (the longest common prefix) is the greatest
lower bound.  Sets of chains in which every pair is prefix-related ("agreeing"
sets) are totally ordered and therefore have well-defined minima and maxima.

Every chain caches a canonical byte encoding of its command sequence, so
equality and prefix tests run as byte comparisons.  Structural sharing of
common prefixes is an internal optimization and never affects value semantics.
"""

from __future__ import annotations

import struct
import sys
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

_CMD_HEADER = struct.Struct("<HIH")  # issuer, seq, payload length


class ChainAgreementError(ValueError):
    """Two chains that were required to agree diverge.

    In protocol code this signals a broken precondition (for example a quorum
    system without the intersection degree a protocol needs); in validation
    paths it signals invalid evidence.
    """

    def __init__(self, first: "Chain", second: "Chain"):
        super().__init__(f"chains do not agree: {first} vs {second}")
        self.first = first
        self.second = second


@dataclass(frozen=True)
class Command:
    """One replicated command; equality is bitwise on (issuer, seq, payload)."""

    issuer: int
    seq: int
    payload: bytes = b""

    def encode(self) -> bytes:
        return _CMD_HEADER.pack(self.issuer, self.seq, len(self.payload)) + self.payload

    @property
    def id_str(self) -> str:
        return f"{self.issuer}.{self.seq}"

    def __repr__(self) -> str:  # compact form for trace debugging
        return f"Command({self.id_str})"


class Chain:
    """An immutable sequence of :class:`Command` values.

    Construct with :func:`chain_of`, :meth:`extend`, or :meth:`prefix`;
    ``BOTTOM`` is the shared empty chain.
    """

    __slots__ = ("commands", "blob", "_ends", "_render", "_hash")

    def __init__(
        self,
        commands: Iterable[Command] = (),
        _blob: bytes | None = None,
        _ends: tuple[int, ...] | None = None,
    ):
        self.commands: tuple[Command, ...] = tuple(commands)
        if _blob is None:
            parts = [c.encode() for c in self.commands]
            ends: list[int] = []
            off = 0
            for part in parts:
                off += len(part)
                ends.append(off)
            _blob = b"".join(parts)
            _ends = tuple(ends)
        self.blob: bytes = _blob
        self._ends: tuple[int, ...] = _ends  # type: ignore[assignment]
        self._render: tuple[str, ...] | None = None
        self._hash: int | None = None

    def __len__(self) -> int:
        return len(self.commands)

    def __iter__(self) -> Iterator[Command]:
        return iter(self.commands)

    def __eq__(self, other: object) -> bool:
        if self is other:
            return True
        if not isinstance(other, Chain):
            return NotImplemented
        return self.blob == other.blob

    def __hash__(self) -> int:
        if self._hash is None:
            self._hash = hash(self.blob)
        return self._hash

    def __str__(self) -> str:
        return "[" + ", ".join(c.id_str for c in self.commands) + "]"

    def __repr__(self) -> str:
        return f"Chain({self})"

    def byte_length(self, count: int) -> int:
        """Encoded size of the first `count` commands."""
        return 0 if count == 0 else self._ends[count - 1]

    def extend(self, commands: Iterable[Command]) -> "Chain":
        new = tuple(commands)
        if not new:
            return self
        parts = [c.encode() for c in new]
        ends = list(self._ends)
        off = len(self.blob)
        for part in parts:
            off += len(part)
            ends.append(off)
        return Chain(self.commands + new, self.blob + b"".join(parts), tuple(ends))

    def prefix(self, count: int) -> "Chain":
        if count <= 0:
            return BOTTOM
        if count >= len(self.commands):
            return self
        cut = self._ends[count - 1]
        return Chain(self.commands[:count], self.blob[:cut], self._ends[:count])

    def render(self) -> tuple[str, ...]:
        """Canonical rendering: the tuple of command ids ("issuer.seq")."""
        if self._render is None:
            self._render = tuple(sys.intern(c.id_str) for c in self.commands)
        return self._render


BOTTOM = Chain()


def chain_of(*commands: Command) -> Chain:
    return Chain(commands)


def decode_chain_blob(blob: bytes) -> Chain:
    """Parse a canonical chain encoding; raises ValueError on malformed bytes."""
    commands: list[Command] = []
    ends: list[int] = []
    off = 0
    total = len(blob)
    while off < total:
        if off + _CMD_HEADER.size > total:
            raise ValueError("truncated command header")
        issuer, seq, plen = _CMD_HEADER.unpack_from(blob, off)
        off += _CMD_HEADER.size
        if off + plen > total:
            raise ValueError("truncated command payload")
        commands.append(Command(issuer, seq, bytes(blob[off : off + plen])))
        off += plen
        ends.append(off)
    return Chain(tuple(commands), bytes(blob), tuple(ends))


def is_prefix(chain: Chain, other: Chain) -> bool:
    """True iff `chain` is an initial segment of `other` (reflexive)."""
    if chain is other:
        return True
    return len(chain.blob) <= len(other.blob) and other.blob.startswith(chain.blob)


def agrees(chain: Chain, other: Chain) -> bool:
    """True iff one of the two chains is a prefix of the other."""
    return is_prefix(chain, other) or is_prefix(other, chain)


def _meet2(a: Chain, b: Chain) -> Chain:
    if is_prefix(a, b):
        return a
    if is_prefix(b, a):
        return b
    # Diverging chains: binary-search the longest shared command prefix.
    # Equal byte prefixes imply equal command prefixes because the encoding
    # parses deterministically left to right.
    lo, hi = 0, min(len(a), len(b))
    while lo < hi:
        mid = (lo + hi + 1) // 2
        cut = a.byte_length(mid)
        if a.blob[:cut] == b.blob[:cut]:
            lo = mid
        else:
            hi = mid - 1
    return a.prefix(lo)


def meet(chains: Iterable[Chain]) -> Chain:
    """Longest common prefix of a nonempty collection of chains."""
    it = iter(chains)
    try:
        acc = next(it)
    except StopIteration:
        raise ValueError("meet of an empty set of chains is undefined") from None
    for c in it:
        if acc is BOTTOM or len(acc) == 0:
            return BOTTOM
        acc = _meet2(acc, c)
    return acc


def _sorted_agreeing(chains: Iterable[Chain]) -> list[Chain]:
    ordered = sorted(chains, key=len)
    if not ordered:
        raise ValueError("min/max of an empty set of chains is undefined")
    # A pairwise-agreeing set is totally ordered by the prefix relation, so
    # after sorting by length each adjacent pair must be prefix-related; and
    # conversely adjacent prefix checks certify pairwise agreement.
    for shorter, longer in zip(ordered, ordered[1:]):
        if not is_prefix(shorter, longer):
            raise ChainAgreementError(shorter, longer)
    return ordered


def max_agreeing(chains: Iterable[Chain]) -> Chain:
    """The unique maximum of a pairwise-agreeing set; verifies agreement."""
    return _sorted_agreeing(chains)[-1]


def min_agreeing(chains: Iterable[Chain]) -> Chain:
    """The unique minimum of a pairwise-agreeing set; verifies agreement."""
    return _sorted_agreeing(chains)[0]
