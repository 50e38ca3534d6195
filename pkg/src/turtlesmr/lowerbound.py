"""Two-round turtle that works with the weakest usable quorum systems.

Round 1: broadcast proposals, wait for a quorum, and compute the meet of the
received proposals.  Round 2: broadcast that meet, wait for a quorum of such
meets, and output (min, max) over them.  Any two round-1 meets share a
supporting proposal because any two quorums intersect, so all round-2 chains
agree and min/max are well defined; 2-intersection is all this needs, at the
price of the extra round.
"""

from __future__ import annotations

from .chain import Chain, ChainAgreementError, max_agreeing, meet, min_agreeing
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

KIND = "lowerbound"
REQUIRED_INTERSECTION = 2
ROUND_PROPOSAL = 1
ROUND_MEET = 2


def round1_meet(received: dict[int, Chain], quorum) -> Chain:
    """The chain a processor carries into round 2: the meet over its round-1
    quorum's proposals."""
    return meet(received[s] for s in quorum)


def round2_output(turtle_index: int, meets: dict[int, Chain], quorum) -> TurtleOutput:
    """Output (min, max) over the round-2 quorum's chains; they must all
    agree, which 2-intersection guarantees for honest executions."""
    chains = [meets[s] for s in quorum]
    try:
        return TurtleOutput(turtle_index, min_agreeing(chains), max_agreeing(chains))
    except ChainAgreementError as exc:
        raise TurtleInvariantError(
            "round-2 chains disagree; the quorum system does not provide "
            f"{REQUIRED_INTERSECTION}-intersection: {exc}"
        ) from exc


class LowerBoundTurtle:
    """Per-instance state machine for the two-round protocol.

    Round-2 messages may arrive before this processor finishes round 1 (other
    processors can be faster); they are recorded immediately and counted once
    the local round-1 meet exists.
    """

    def __init__(self, system: QuorumSystem, codec: ChainCodec, turtle_index: int):
        self.system = system
        self.codec = codec
        self.turtle_index = turtle_index
        self.proposals: dict[int, Chain] = {}
        self.meets: dict[int, Chain] = {}
        self.meet_chain: Chain | None = None
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
        if round_tag == ROUND_PROPOSAL:
            return self._on_proposal(sender, payload)
        if round_tag == ROUND_MEET:
            return self._on_meet(sender, payload)
        return [Discarded("unknown-round", sender)]

    def _on_proposal(self, sender: int, payload: bytes) -> list[TurtleAction]:
        if self.meet_chain is not None or sender in self.proposals:
            return []  # round 1 already complete here, or duplicate
        try:
            chain = self.codec.decode_chain_exact(payload)
        except MalformedPayload:
            return [Discarded("malformed", sender)]
        self.proposals[sender] = chain
        actions: list[TurtleAction] = []
        if len(self.proposals) == self.system.quorum_size:
            self.meet_chain = round1_meet(self.proposals, tuple(self.proposals))
            actions.append(Broadcast(ROUND_MEET, self.codec.encode_chain(self.meet_chain)))
            actions.extend(self._maybe_complete())
        return actions

    def _on_meet(self, sender: int, payload: bytes) -> list[TurtleAction]:
        if sender in self.meets:
            return []
        try:
            chain = self.codec.decode_chain_exact(payload)
        except MalformedPayload:
            return [Discarded("malformed", sender)]
        self.meets[sender] = chain
        return self._maybe_complete()

    def _maybe_complete(self) -> list[TurtleAction]:
        if self.meet_chain is None or len(self.meets) < self.system.quorum_size:
            return []
        quorum = tuple(self.meets)[: self.system.quorum_size]
        self.done = True
        return [ProduceOutput(round2_output(self.turtle_index, self.meets, quorum))]
