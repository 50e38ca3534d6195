"""Byzantine-tolerant turtles: signatures, evidence, validators, adversaries.

A Byzantine processor may send arbitrary messages but cannot forge other
processors' signatures.  Inputs and outputs therefore carry evidence, a
quorum of signed chains from which the receiver can recompute the claimed
values; anything that does not check out is discarded.  The one-step variant
needs 5-intersection, the two-round variant 3-intersection.

Signatures are simulation grade: signing registers (signer, digest, nonce)
with a run-local ledger and verification is ledger membership, which models
exactly "replayable but unforgeable".  A real scheme can be plugged in behind
the same surface.
"""

from __future__ import annotations

import hashlib
import itertools
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .chain import (
    BOTTOM,
    Chain,
    ChainAgreementError,
    is_prefix,
    max_agreeing,
    meet,
    min_agreeing,
)
from .quorum import QuorumSystem
from .report import PropertyResult, TraceIndex
from .smr import (
    ChainCodec,
    SmrEngine,
    _agreement,
    _all_complete,
    _decided_prefix_of_later_inputs,
    _monotonicity,
    _relay,
    _validity,
)
from .turtle_core import (
    Broadcast,
    Discarded,
    InputAccepted,
    MalformedPayload,
    ProduceOutput,
    TurtleAction,
    TurtleInvariantError,
    TurtleUsageError,
)

_SIG_WIRE = struct.Struct("<HQ32s")  # signer, nonce, digest
_OUTPUT_HEADER = struct.Struct("<QH")  # turtle index, evidence entry count
_ENTRY_LIMIT = 4096

# Signing domains: a signature binds (instance, step, chain) so that chains
# signed for one instance or protocol step cannot be replayed as another.
DOMAIN_PROPOSAL = 0x50  # round-1 input chains
DOMAIN_MEET = 0x58  # round-2 meet chains


@dataclass(frozen=True)
class Signature:
    signer: int
    digest: bytes
    nonce: int

    def encode(self) -> bytes:
        return _SIG_WIRE.pack(self.signer, self.nonce, self.digest)


def signing_bytes(instance: int, domain: int, chain: Chain) -> bytes:
    return struct.pack("<QB", instance, domain) + chain.blob


class SignatureLedger:
    """Run-local trusted registry backing sign/verify."""

    def __init__(self) -> None:
        self._entries: set[tuple[int, bytes, int]] = set()
        self._next_nonce = 1
        self._digests: dict[tuple[int, int, bytes], bytes] = {}

    def digest(self, message: bytes) -> bytes:
        return hashlib.sha256(message).digest()

    def chain_digest(self, instance: int, domain: int, chain: Chain) -> bytes:
        key = (instance, domain, chain.blob)
        d = self._digests.get(key)
        if d is None:
            d = self.digest(signing_bytes(instance, domain, chain))
            self._digests[key] = d
        return d

    def sign(self, signer: int, message: bytes) -> Signature:
        sig = Signature(signer, self.digest(message), self._next_nonce)
        self._next_nonce += 1
        self._entries.add((sig.signer, sig.digest, sig.nonce))
        return sig

    def sign_digest(self, signer: int, digest: bytes) -> Signature:
        sig = Signature(signer, digest, self._next_nonce)
        self._next_nonce += 1
        self._entries.add((sig.signer, sig.digest, sig.nonce))
        return sig

    def verify(self, signer: int, message: bytes, sig: Signature) -> bool:
        return self.verify_digest(signer, self.digest(message), sig)

    def verify_digest(self, signer: int, digest: bytes, sig: Signature) -> bool:
        return (
            sig.signer == signer
            and sig.digest == digest
            and (sig.signer, sig.digest, sig.nonce) in self._entries
        )


class Signer:
    """A processor's signing handle; bound to one identity, so a Byzantine
    processor can sign anything as itself but nothing as anyone else."""

    def __init__(self, ledger: SignatureLedger, pid: int):
        self.ledger = ledger
        self.pid = pid

    def sign_chain(self, instance: int, domain: int, chain: Chain) -> Signature:
        return self.ledger.sign_digest(
            self.pid, self.ledger.chain_digest(instance, domain, chain)
        )


@dataclass(frozen=True)
class BftOutput:
    """Output (decided, upper) plus the signed chains it was computed from."""

    turtle_index: int
    decided: Chain
    upper: Chain
    evidence: tuple[tuple[Chain, Signature], ...]


@dataclass(frozen=True)
class BftInput:
    """Proposal chain plus the previous instance's output as evidence."""

    turtle_index: int
    chain: Chain
    evidence: BftOutput


# Well-known evidence accepted for instance 1 in place of an instance-0 output.
BFT_GENESIS = BftOutput(0, BOTTOM, BOTTOM, ())


@dataclass(frozen=True)
class Validation:
    ok: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.ok


_OK = Validation(True)


def should_decide(longest_decided: Chain, output: BftOutput) -> bool:
    """Byzantine composition decide rule: decide only chains strictly longer
    than anything decided before (the engine applies the same rule)."""
    return len(output.decided) > len(longest_decided)


# --- wire helpers -------------------------------------------------------------


def _decode_signature(buf: bytes, offset: int) -> tuple[Signature, int]:
    if offset + _SIG_WIRE.size > len(buf):
        raise MalformedPayload("truncated signature")
    signer, nonce, digest = _SIG_WIRE.unpack_from(buf, offset)
    return Signature(signer, bytes(digest), nonce), offset + _SIG_WIRE.size


def encode_entries(
    codec: ChainCodec, entries: Sequence[tuple[Chain, Signature]]
) -> bytes:
    parts = [struct.pack("<H", len(entries))]
    for chain, sig in entries:
        parts.append(codec.encode_chain(chain))
        parts.append(sig.encode())
    return b"".join(parts)


def _decode_entries(
    codec: ChainCodec, buf: bytes, offset: int
) -> tuple[tuple[tuple[Chain, Signature], ...], int]:
    if offset + 2 > len(buf):
        raise MalformedPayload("truncated entry count")
    (count,) = struct.unpack_from("<H", buf, offset)
    offset += 2
    if count > _ENTRY_LIMIT:
        raise MalformedPayload("entry count out of range")
    entries = []
    for _ in range(count):
        chain, offset = codec.decode_chain(buf, offset)
        sig, offset = _decode_signature(buf, offset)
        entries.append((chain, sig))
    return tuple(entries), offset


def encode_bft_output(codec: ChainCodec, out: BftOutput) -> bytes:
    return (
        _OUTPUT_HEADER.pack(out.turtle_index, len(out.evidence))
        + codec.encode_chain(out.decided)
        + codec.encode_chain(out.upper)
        + b"".join(
            codec.encode_chain(chain) + sig.encode() for chain, sig in out.evidence
        )
    )


def decode_bft_output(codec: ChainCodec, buf: bytes, offset: int) -> tuple[BftOutput, int]:
    if offset + _OUTPUT_HEADER.size > len(buf):
        raise MalformedPayload("truncated output header")
    index, count = _OUTPUT_HEADER.unpack_from(buf, offset)
    offset += _OUTPUT_HEADER.size
    if count > _ENTRY_LIMIT:
        raise MalformedPayload("entry count out of range")
    decided, offset = codec.decode_chain(buf, offset)
    upper, offset = codec.decode_chain(buf, offset)
    entries = []
    for _ in range(count):
        chain, offset = codec.decode_chain(buf, offset)
        sig, offset = _decode_signature(buf, offset)
        entries.append((chain, sig))
    return BftOutput(index, decided, upper, tuple(entries)), offset


def encode_round1_payload(
    codec: ChainCodec, instance: int, bft_input: BftInput, chain_sig: Signature
) -> bytes:
    return (
        codec.encode_chain(bft_input.chain)
        + encode_bft_output(codec, bft_input.evidence)
        + chain_sig.encode()
    )


def parse_round1_payload(
    codec: ChainCodec, instance: int, buf: bytes
) -> tuple[BftInput, Signature]:
    chain, offset = codec.decode_chain(buf, 0)
    evidence, offset = decode_bft_output(codec, buf, offset)
    sig, offset = _decode_signature(buf, offset)
    if offset != len(buf):
        raise MalformedPayload("trailing bytes in proposal payload")
    return BftInput(instance, chain, evidence), sig


def encode_round2_payload(
    codec: ChainCodec,
    meet_chain: Chain,
    meet_sig: Signature,
    entries: Sequence[tuple[Chain, Signature]],
) -> bytes:
    return (
        codec.encode_chain(meet_chain) + meet_sig.encode() + encode_entries(codec, entries)
    )


def parse_round2_payload(
    codec: ChainCodec, buf: bytes
) -> tuple[Chain, Signature, tuple[tuple[Chain, Signature], ...]]:
    meet_chain, offset = codec.decode_chain(buf, 0)
    meet_sig, offset = _decode_signature(buf, offset)
    entries, offset = _decode_entries(codec, buf, offset)
    if offset != len(buf):
        raise MalformedPayload("trailing bytes in round-2 payload")
    return meet_chain, meet_sig, entries


# --- validators ---------------------------------------------------------------


def _check_quorum_entries(
    entries: Sequence[tuple[Chain, Signature]],
    system: QuorumSystem,
    ledger: SignatureLedger,
    instance: int,
    domain: int,
) -> Validation:
    signers = [sig.signer for _, sig in entries]
    if len(set(signers)) != len(signers):
        return Validation(False, "not-a-quorum")
    try:
        if not system.is_quorum(signers):
            return Validation(False, "not-a-quorum")
    except ValueError:
        return Validation(False, "not-a-quorum")
    for chain, sig in entries:
        if not ledger.verify_digest(
            sig.signer, ledger.chain_digest(instance, domain, chain), sig
        ):
            return Validation(False, "bad-signature")
    return _OK


def bft_candidate_meets(
    received: Mapping[int, Chain], quorum: Iterable[int], system: QuorumSystem
) -> list[Chain]:
    """Candidate family for the Byzantine one-step rule.

    Candidates are meets over the fixed quorum's intersections with two other
    quorums; for a threshold system those are exactly its subsets of size
    >= n - 3f, and the smallest subsets dominate the maximum.
    """
    members = sorted(quorum)
    size = min(len(members), max(1, system.n - 3 * system.f))
    return [
        meet(received[s] for s in combo)
        for combo in itertools.combinations(members, size)
    ]


def compute_bft_onestep_chains(
    received: Mapping[int, Chain], quorum: Iterable[int], system: QuorumSystem
) -> tuple[Chain, Chain]:
    members = list(quorum)
    decided = meet(received[s] for s in members)
    candidates = bft_candidate_meets(received, members, system)
    upper = max_agreeing(candidates)  # ChainAgreementError escalated by callers
    return decided, upper


def validate_bft_onestep_output(
    out: BftOutput, system: QuorumSystem, ledger: SignatureLedger
) -> Validation:
    """The evidence must be a quorum of validly signed proposal chains from
    which the claimed (decided, upper) recompute exactly."""
    ok = _check_quorum_entries(
        out.evidence, system, ledger, out.turtle_index, DOMAIN_PROPOSAL
    )
    if not ok:
        return ok
    chains = {sig.signer: chain for chain, sig in out.evidence}
    try:
        decided, upper = compute_bft_onestep_chains(chains, chains.keys(), system)
    except ChainAgreementError:
        return Validation(False, "recompute-mismatch")
    if decided != out.decided or upper != out.upper:
        return Validation(False, "recompute-mismatch")
    return _OK


def validate_bft_lowerbound_output(
    out: BftOutput, system: QuorumSystem, ledger: SignatureLedger
) -> Validation:
    """The evidence must be a quorum of validly signed round-2 chains that all
    agree, with (decided, upper) equal to their minimum and maximum."""
    ok = _check_quorum_entries(out.evidence, system, ledger, out.turtle_index, DOMAIN_MEET)
    if not ok:
        return ok
    chains = [chain for chain, _ in out.evidence]
    try:
        decided, upper = min_agreeing(chains), max_agreeing(chains)
    except ChainAgreementError:
        return Validation(False, "non-agreeing-chains")
    if decided != out.decided or upper != out.upper:
        return Validation(False, "recompute-mismatch")
    return _OK


def validate_bft_lowerbound_message2(
    meet_chain: Chain,
    meet_sig: Signature,
    entries: Sequence[tuple[Chain, Signature]],
    sender: int,
    instance: int,
    system: QuorumSystem,
    ledger: SignatureLedger,
) -> Validation:
    """A round-2 message must carry the sender's signature over its meet
    chain and a quorum of signed proposals whose meet equals that chain."""
    if not ledger.verify_digest(
        sender, ledger.chain_digest(instance, DOMAIN_MEET, meet_chain), meet_sig
    ):
        return Validation(False, "bad-signature")
    ok = _check_quorum_entries(entries, system, ledger, instance, DOMAIN_PROPOSAL)
    if not ok:
        return ok
    if meet(chain for chain, _ in entries) != meet_chain:
        return Validation(False, "recompute-mismatch")
    return _OK


def validate_bft_input(
    bft_input: BftInput,
    instance: int,
    system: QuorumSystem,
    ledger: SignatureLedger,
    prev_kind: str,
) -> Validation:
    """An input to instance i must carry a valid output of instance i-1 whose
    upper chain its proposal extends (instance 1 carries the genesis value)."""
    if bft_input.turtle_index != instance:
        return Validation(False, "malformed")
    evidence = bft_input.evidence
    if instance == 1:
        if evidence != BFT_GENESIS:
            return Validation(False, "bad-evidence")
    else:
        if evidence.turtle_index != instance - 1:
            return Validation(False, "stale-evidence")
        if prev_kind == BftOneStepTurtle.KIND:
            ok = validate_bft_onestep_output(evidence, system, ledger)
        elif prev_kind == BftLowerBoundTurtle.KIND:
            ok = validate_bft_lowerbound_output(evidence, system, ledger)
        else:
            return Validation(False, "bad-evidence")
        if not ok:
            return Validation(False, "bad-evidence")
    if not is_prefix(evidence.upper, bft_input.chain):
        return Validation(False, "chain-below-evidence")
    return _OK


# --- protocol state machines --------------------------------------------------


class BftOneStepTurtle:
    """Evidence-carrying single-round turtle; requires 5-intersection."""

    KIND = "bft_onestep"
    REQUIRED_INTERSECTION = 5
    ROUND_PROPOSAL = 1

    def __init__(
        self,
        system: QuorumSystem,
        codec: ChainCodec,
        signer: Signer,
        ledger: SignatureLedger,
        turtle_index: int,
        prev_kind: str,
    ):
        self.system = system
        self.codec = codec
        self.signer = signer
        self.ledger = ledger
        self.turtle_index = turtle_index
        self.prev_kind = prev_kind
        self.received: dict[int, tuple[Chain, Signature]] = {}
        self.started = False
        self.done = False

    def start(self, bft_input: BftInput) -> list[TurtleAction]:
        if self.started:
            raise TurtleUsageError("turtle instance started twice")
        self.started = True
        sig = self.signer.sign_chain(self.turtle_index, DOMAIN_PROPOSAL, bft_input.chain)
        payload = encode_round1_payload(self.codec, self.turtle_index, bft_input, sig)
        return [Broadcast(self.ROUND_PROPOSAL, payload)]

    def on_message(self, sender: int, round_tag: int, payload: bytes) -> list[TurtleAction]:
        if not self.started:
            raise TurtleUsageError("message before start")
        if self.done:
            return []
        if round_tag != self.ROUND_PROPOSAL:
            return [Discarded("unknown-round", sender)]
        if sender in self.received:
            return []
        try:
            bft_input, sig = parse_round1_payload(self.codec, self.turtle_index, payload)
        except MalformedPayload:
            return [Discarded("malformed", sender)]
        if not self.ledger.verify_digest(
            sender,
            self.ledger.chain_digest(self.turtle_index, DOMAIN_PROPOSAL, bft_input.chain),
            sig,
        ):
            return [Discarded("bad-signature", sender)]
        ok = validate_bft_input(
            bft_input, self.turtle_index, self.system, self.ledger, self.prev_kind
        )
        if not ok:
            return [Discarded(ok.reason, sender)]
        self.received[sender] = (bft_input.chain, sig)
        actions: list[TurtleAction] = [InputAccepted(sender, bft_input.chain)]
        if len(self.received) == self.system.quorum_size:
            quorum = tuple(self.received)
            chains = {s: c for s, (c, _) in self.received.items()}
            try:
                decided, upper = compute_bft_onestep_chains(chains, quorum, self.system)
            except ChainAgreementError as exc:
                raise TurtleInvariantError(
                    "candidate meets disagree; the quorum system does not provide "
                    f"{self.REQUIRED_INTERSECTION}-intersection: {exc}"
                ) from exc
            evidence = tuple(self.received[s] for s in quorum)
            out = BftOutput(self.turtle_index, decided, upper, evidence)
            if not validate_bft_onestep_output(out, self.system, self.ledger):
                raise TurtleInvariantError("own output failed validation")
            self.done = True
            actions.append(ProduceOutput(out))
        return actions


class BftLowerBoundTurtle:
    """Evidence-carrying two-round turtle; requires 3-intersection.

    Round-2 messages are self-certifying (the meet chain is recomputable from
    the quorum of signed proposals they carry), so they are validated and
    recorded even while the local round 1 is still in flight.
    """

    KIND = "bft_lowerbound"
    REQUIRED_INTERSECTION = 3
    ROUND_PROPOSAL = 1
    ROUND_MEET = 2

    def __init__(
        self,
        system: QuorumSystem,
        codec: ChainCodec,
        signer: Signer,
        ledger: SignatureLedger,
        turtle_index: int,
        prev_kind: str,
    ):
        self.system = system
        self.codec = codec
        self.signer = signer
        self.ledger = ledger
        self.turtle_index = turtle_index
        self.prev_kind = prev_kind
        self.proposals: dict[int, tuple[Chain, Signature]] = {}
        self.meets: dict[int, tuple[Chain, Signature]] = {}
        self.meet_chain: Chain | None = None
        self.started = False
        self.done = False

    def start(self, bft_input: BftInput) -> list[TurtleAction]:
        if self.started:
            raise TurtleUsageError("turtle instance started twice")
        self.started = True
        sig = self.signer.sign_chain(self.turtle_index, DOMAIN_PROPOSAL, bft_input.chain)
        payload = encode_round1_payload(self.codec, self.turtle_index, bft_input, sig)
        return [Broadcast(self.ROUND_PROPOSAL, payload)]

    def on_message(self, sender: int, round_tag: int, payload: bytes) -> list[TurtleAction]:
        if not self.started:
            raise TurtleUsageError("message before start")
        if self.done:
            return []
        if round_tag == self.ROUND_PROPOSAL:
            return self._on_proposal(sender, payload)
        if round_tag == self.ROUND_MEET:
            return self._on_meet(sender, payload)
        return [Discarded("unknown-round", sender)]

    def _on_proposal(self, sender: int, payload: bytes) -> list[TurtleAction]:
        # Proposals keep being recorded after round 1 completes locally; they
        # no longer feed this processor's meet, but they are still accepted
        # inputs (and a Byzantine peer could build its round-2 message from a
        # different quorum of them, which receivers must tolerate).
        if sender in self.proposals:
            return []
        try:
            bft_input, sig = parse_round1_payload(self.codec, self.turtle_index, payload)
        except MalformedPayload:
            return [Discarded("malformed", sender)]
        if not self.ledger.verify_digest(
            sender,
            self.ledger.chain_digest(self.turtle_index, DOMAIN_PROPOSAL, bft_input.chain),
            sig,
        ):
            return [Discarded("bad-signature", sender)]
        ok = validate_bft_input(
            bft_input, self.turtle_index, self.system, self.ledger, self.prev_kind
        )
        if not ok:
            return [Discarded(ok.reason, sender)]
        self.proposals[sender] = (bft_input.chain, sig)
        actions: list[TurtleAction] = [InputAccepted(sender, bft_input.chain)]
        if self.meet_chain is None and len(self.proposals) >= self.system.quorum_size:
            entries = tuple(self.proposals[s] for s in self.proposals)
            self.meet_chain = meet(chain for chain, _ in entries)
            meet_sig = self.signer.sign_chain(
                self.turtle_index, DOMAIN_MEET, self.meet_chain
            )
            payload2 = encode_round2_payload(self.codec, self.meet_chain, meet_sig, entries)
            actions.append(Broadcast(self.ROUND_MEET, payload2))
            actions.extend(self._maybe_complete())
        return actions

    def _on_meet(self, sender: int, payload: bytes) -> list[TurtleAction]:
        if sender in self.meets:
            return []
        try:
            meet_chain, meet_sig, entries = parse_round2_payload(self.codec, payload)
        except MalformedPayload:
            return [Discarded("malformed", sender)]
        ok = validate_bft_lowerbound_message2(
            meet_chain, meet_sig, entries, sender, self.turtle_index,
            self.system, self.ledger,
        )
        if not ok:
            return [Discarded(ok.reason, sender)]
        self.meets[sender] = (meet_chain, meet_sig)
        return self._maybe_complete()

    def _maybe_complete(self) -> list[TurtleAction]:
        if (
            self.done
            or self.meet_chain is None
            or len(self.meets) < self.system.quorum_size
        ):
            return []
        quorum = tuple(self.meets)[: self.system.quorum_size]
        evidence = tuple(self.meets[s] for s in quorum)
        chains = [chain for chain, _ in evidence]
        try:
            decided, upper = min_agreeing(chains), max_agreeing(chains)
        except ChainAgreementError as exc:
            raise TurtleInvariantError(
                "validated round-2 chains disagree; the quorum system does not "
                f"provide {self.REQUIRED_INTERSECTION}-intersection: {exc}"
            ) from exc
        out = BftOutput(self.turtle_index, decided, upper, evidence)
        if not validate_bft_lowerbound_output(out, self.system, self.ledger):
            raise TurtleInvariantError("own output failed validation")
        self.done = True
        return [ProduceOutput(out)]


# --- adversaries ----------------------------------------------------------------


class AdversaryStrategy:
    """Transforms a Byzantine processor's outgoing broadcasts.

    Returns None to broadcast honestly or a list of (destination, payload)
    pairs (possibly empty) to replace the broadcast.  Strategies may use the
    adversary's signer and anything it has observed; they cannot sign as
    other processors.
    """

    name = "honest"

    def on_broadcast(
        self, adversary: "AdversaryEngine", instance: int, round_tag: int, payload: bytes
    ) -> list[tuple[int, bytes]] | None:
        return None

    def on_deliver(
        self, adversary: "AdversaryEngine", env
    ) -> list[tuple[int, int, int, bytes]]:
        """Extra (dest, instance, round_tag, payload) messages to inject after
        the adversary observes `env`."""
        return []


class SilentAdversary(AdversaryStrategy):
    name = "silent"

    def on_broadcast(self, adversary, instance, round_tag, payload):
        return []


class EquivocateAdversary(AdversaryStrategy):
    """Sends a diverging (but individually valid) proposal to half the
    processors in round 1."""

    name = "equivocate"

    def on_broadcast(self, adversary, instance, round_tag, payload):
        if round_tag != BftOneStepTurtle.ROUND_PROPOSAL:
            return None
        shadow = adversary.shadow
        variant_chain = shadow._own_candidate.extend([adversary.feed.mint_one()])
        variant = adversary.encode_round1(instance, variant_chain)
        half = adversary.system.n // 2
        return [
            (dest, payload if dest < half else variant)
            for dest in range(adversary.system.n)
        ]


class GarbageSignatureAdversary(AdversaryStrategy):
    """Round-1 messages carry a signature that was never registered."""

    name = "garbage-signatures"

    def on_broadcast(self, adversary, instance, round_tag, payload):
        if round_tag != BftOneStepTurtle.ROUND_PROPOSAL:
            return None
        shadow = adversary.shadow
        bogus = Signature(adversary.pid, b"\x00" * 32, 0)
        bft_input = BftInput(instance, shadow._own_candidate, shadow._last_evidence)
        forged = encode_round1_payload(adversary.codec, instance, bft_input, bogus)
        return [(dest, forged) for dest in range(adversary.system.n)]


class StaleEvidenceAdversary(AdversaryStrategy):
    """Replays its own older output as evidence for new proposals."""

    name = "stale-evidence-replay"

    def __init__(self) -> None:
        self.history: dict[int, BftOutput] = {}

    def on_broadcast(self, adversary, instance, round_tag, payload):
        if round_tag != BftOneStepTurtle.ROUND_PROPOSAL:
            return None
        shadow = adversary.shadow
        evidence = shadow._last_evidence
        self.history[evidence.turtle_index] = evidence
        stale = self.history.get(instance - 2)
        if stale is None or stale.turtle_index == evidence.turtle_index:
            return None
        sig = adversary.signer.sign_chain(
            instance, DOMAIN_PROPOSAL, shadow._own_candidate
        )
        forged = encode_round1_payload(
            adversary.codec, instance, BftInput(instance, shadow._own_candidate, stale), sig
        )
        return [(dest, forged) for dest in range(adversary.system.n)]


class DivergentMeetAdversary(AdversaryStrategy):
    """Attacks round 2 of the two-round protocol on two fronts: at its own
    round-2 broadcast it sends half the processors an extension of the true
    meet (invalid: it fails recomputation and must be discarded), and once it
    has seen more proposals than a quorum it re-sends a round-2 message built
    from a different proposal quorum (valid: receivers that take it first
    must still end up with a chain agreeing with everyone else's)."""

    name = "divergent-x"

    def __init__(self) -> None:
        self.alternative_sent: set[int] = set()

    def on_broadcast(self, adversary, instance, round_tag, payload):
        if round_tag != BftLowerBoundTurtle.ROUND_MEET:
            return None
        turtle = adversary.shadow._turtle
        if not isinstance(turtle, BftLowerBoundTurtle) or turtle.meet_chain is None:
            return None
        fake = turtle.meet_chain.extend([adversary.feed.mint_one()])
        sig = adversary.signer.sign_chain(instance, DOMAIN_MEET, fake)
        entries = tuple(turtle.proposals.values())[: turtle.system.quorum_size]
        variant = encode_round2_payload(adversary.codec, fake, sig, entries)
        half = adversary.system.n // 2
        return [
            (dest, payload if dest < half else variant)
            for dest in range(adversary.system.n)
        ]

    def on_deliver(self, adversary, env):
        turtle = adversary.shadow._turtle
        if (
            not isinstance(turtle, BftLowerBoundTurtle)
            or turtle.meet_chain is None
            or turtle.turtle_index in self.alternative_sent
        ):
            return []
        senders = list(turtle.proposals)
        size = turtle.system.quorum_size
        if len(senders) <= size:
            return []
        self.alternative_sent.add(turtle.turtle_index)
        alt = senders[len(senders) - size :]
        entries = tuple(turtle.proposals[s] for s in alt)
        alt_meet = meet(chain for chain, _ in entries)
        sig = adversary.signer.sign_chain(turtle.turtle_index, DOMAIN_MEET, alt_meet)
        payload = encode_round2_payload(adversary.codec, alt_meet, sig, entries)
        return [
            (dest, turtle.turtle_index, BftLowerBoundTurtle.ROUND_MEET, payload)
            for dest in range(adversary.system.n)
            if dest % 2 == 1 and dest != adversary.pid
        ]


ADVERSARY_STRATEGIES: dict[str, type[AdversaryStrategy]] = {
    cls.name: cls
    for cls in (
        SilentAdversary,
        EquivocateAdversary,
        GarbageSignatureAdversary,
        StaleEvidenceAdversary,
        DivergentMeetAdversary,
    )
}


class _InterceptingContext:
    """Context proxy for a Byzantine processor: outgoing broadcasts pass
    through the strategy, and the shadow engine's protocol trace events are
    suppressed (a Byzantine processor's own bookkeeping is not part of the
    checked protocol record; its messages still appear as network events)."""

    def __init__(self, adversary: "AdversaryEngine", real_ctx):
        self._adversary = adversary
        self._real = real_ctx

    def broadcast(self, instance: int, round_tag: int, payload: bytes) -> None:
        plan = self._adversary.strategy.on_broadcast(
            self._adversary, instance, round_tag, payload
        )
        if plan is None:
            self._real.broadcast(instance, round_tag, payload)
            return
        for dest, alt_payload in plan:
            self._real.send(dest, instance, round_tag, alt_payload)

    def send(self, dest: int, instance: int, round_tag: int, payload: bytes) -> None:
        self._real.send(dest, instance, round_tag, payload)

    def set_timer(self, delay: int) -> int:
        return self._real.set_timer(delay)

    def trace(self, kind: str, **fields) -> None:
        pass


class AdversaryEngine:
    """Byzantine processor driver: an honest engine runs in its shadow so the
    strategy always has protocol-consistent state (evidence, proposals,
    received signatures) to build attacks from."""

    def __init__(
        self,
        shadow: SmrEngine,
        strategy: AdversaryStrategy,
        signer: Signer,
        codec: ChainCodec,
        feed,
    ):
        self.shadow = shadow
        self.strategy = strategy
        self.signer = signer
        self.codec = codec
        self.feed = feed
        self.pid = shadow.pid
        self.system = shadow.system

    def encode_round1(self, instance: int, chain: Chain) -> bytes:
        sig = self.signer.sign_chain(instance, DOMAIN_PROPOSAL, chain)
        bft_input = BftInput(instance, chain, self.shadow._last_evidence)
        return encode_round1_payload(self.codec, instance, bft_input, sig)

    def attach(self, ctx) -> None:
        self.shadow.attach(_InterceptingContext(self, ctx))

    def begin(self) -> None:
        self.shadow.begin()

    def on_envelope(self, env) -> None:
        self.shadow.on_envelope(env)

    def on_timer(self, timer_id: int) -> None:
        self.shadow.on_timer(timer_id)


# --- trace properties ----------------------------------------------------------


def check_bft_smr_trace(
    events: Iterable[Mapping],
    *,
    correct: set[int],
    instances: int,
) -> list[PropertyResult]:
    """Byzantine replication properties over a quiesced trace, quantified
    over correct processors' decisions.  Inputs are the proposals correct
    processors accepted as valid (which includes every correct processor's
    own proposal via self-delivery)."""
    idx = TraceIndex(events)
    decides = [d for d in idx.decides if d.proc in correct]
    outputs = [o for o in idx.outputs if o.proc in correct]
    accepted = [i for i in idx.input_oks if i.proc in correct]
    proposal_chains = [i.chain for i in accepted] + [
        p.chain for p in idx.proposes if p.proc in correct
    ]
    return [
        _agreement(decides, "bft-"),
        _validity(decides, proposal_chains, "bft-"),
        _relay(decides, outputs, correct, "bft-"),
        _monotonicity(decides, "bft-"),
        _decided_prefix_of_later_inputs(outputs, accepted, "bft-"),
        _all_complete(outputs, correct, instances, "bft-"),
    ]
