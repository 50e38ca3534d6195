"""One-step turtle: a single broadcast round per instance.

Every processor broadcasts its proposal and waits for proposals from any
quorum Q.  It decides the meet of the received chains and bounds the next
round with the best chain that any other quorum's view can still support:
the maximum over the meets of Q's intersections with every other quorum.
Correctness of that maximum needs any three quorums to share a processor,
so this protocol requires a 3-intersecting quorum system.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Mapping

from .chain import Chain, ChainAgreementError, max_agreeing, meet
from .quorum import QuorumSystem
from .smr import ChainCodec
from .turtle_core import (
    Broadcast,
    Discarded,
    MalformedPayload,
    ProduceOutput,
    TurtleAction,
    TurtleInput,
    TurtleInvariantError,
    TurtleOutput,
    TurtleUsageError,
)

KIND = "onestep"
REQUIRED_INTERSECTION = 3
ROUND_PROPOSAL = 1


def candidate_meets(
    received: Mapping[int, Chain], quorum: Iterable[int], system: QuorumSystem
) -> list[Chain]:
    """Literal candidate family: meets over the fixed quorum's intersection
    with every minimal quorum.  Reference implementation for tests."""
    fixed = frozenset(quorum)
    candidates = []
    for other in system.minimal_quorums():
        overlap = fixed & other
        if overlap:
            candidates.append(meet(received[s] for s in overlap))
    return candidates


def candidate_meets_threshold(
    received: Mapping[int, Chain], quorum: Iterable[int], system: QuorumSystem
) -> list[Chain]:
    """Candidate family restricted to the smallest realizable intersections.

    For a threshold system the realizable intersections of the fixed quorum
    with another quorum are exactly its subsets of size >= n - 2f, and meets
    over larger subsets are prefixes of meets over the smallest ones, so the
    maximum is unchanged.  Verified equivalent to `candidate_meets` by test.
    """
    members = sorted(quorum)
    size = min(len(members), max(1, system.min_intersection_size(2)))
    return [
        meet(received[s] for s in combo)
        for combo in itertools.combinations(members, size)
    ]


def compute_onestep_output(
    turtle_index: int,
    received: Mapping[int, Chain],
    quorum: Iterable[int],
    system: QuorumSystem,
    verify_candidates: bool = True,
) -> TurtleOutput:
    """Output of step 1: decided = meet over the quorum, upper = max of the
    candidate family.

    With 3-intersection all candidates agree, so the maximum is unique; a
    disagreeing candidate family means the quorum system was misconfigured
    and raises TurtleInvariantError.  `verify_candidates=False` skips the
    agreement check and picks the longest candidate (deterministically by
    encoding); it exists to demonstrate how the protocol misbehaves on
    2-intersecting systems and must never be used in a real run.
    """
    members = list(quorum)
    decided = meet(received[s] for s in members)
    candidates = candidate_meets_threshold(received, members, system)
    if verify_candidates:
        try:
            upper = max_agreeing(candidates)
        except ChainAgreementError as exc:
            raise TurtleInvariantError(
                "candidate meets disagree; the quorum system does not provide "
                f"{REQUIRED_INTERSECTION}-intersection: {exc}"
            ) from exc
    else:
        upper = max(candidates, key=lambda c: (len(c), c.blob))
    return TurtleOutput(turtle_index, decided, upper)


class OneStepTurtle:
    """Per-instance state machine for the one-step protocol."""

    def __init__(
        self,
        system: QuorumSystem,
        codec: ChainCodec,
        turtle_index: int,
        verify_candidates: bool = True,
    ):
        self.system = system
        self.codec = codec
        self.turtle_index = turtle_index
        self.verify_candidates = verify_candidates
        self.received: dict[int, Chain] = {}
        self.started = False
        self.done = False

    def start(self, turtle_input: TurtleInput) -> list[TurtleAction]:
        if self.started:
            raise TurtleUsageError("turtle instance started twice")
        self.started = True
        return [Broadcast(ROUND_PROPOSAL, self.codec.encode_chain(turtle_input.chain))]

    def on_message(self, sender: int, round_tag: int, payload: bytes) -> list[TurtleAction]:
        if not self.started:
            raise TurtleUsageError("message before start")
        if self.done:
            return []
        if round_tag != ROUND_PROPOSAL:
            return [Discarded("unknown-round", sender)]
        if sender in self.received:
            return []  # duplicate; first message per sender wins
        try:
            chain = self.codec.decode_chain_exact(payload)
        except MalformedPayload:
            return [Discarded("malformed", sender)]
        self.received[sender] = chain
        if len(self.received) == self.system.quorum_size:
            quorum = tuple(self.received)  # senders of the first quorum of messages
            self.done = True
            out = compute_onestep_output(
                self.turtle_index, self.received, quorum, self.system,
                self.verify_candidates,
            )
            return [ProduceOutput(out)]
        return []
