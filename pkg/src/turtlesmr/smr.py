"""Unbounded composition of turtle instances into state machine replication.

Every processor executes turtle instances 1, 2, 3, ... in succession.  When
instance i yields (decided, upper) the processor decides `decided`, extends
`upper` with pending commands to form its next proposal, and feeds that to
instance i+1.  Because every new proposal extends the previous upper chain,
decisions of earlier instances are prefixes of all later inputs, which makes
all decisions everywhere mutually prefix-related.

This module also implements the message-size optimization: once a processor
has decided a chain, every other processor that completed the same instance
already knows that chain's contents, so outgoing chains may omit the decided
prefix and carry only (omitted length, suffix).
"""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .chain import BOTTOM, Chain, Command, decode_chain_blob, is_prefix, meet
from .leader import (
    LEADER_ROUND_TAG,
    LeaderConfig,
    choose_input,
    leader_for,
    timer_length,
)
from .quorum import QuorumSystem
from .report import PropertyResult, TraceIndex
from .turtle_core import (
    Broadcast,
    Discarded,
    Envelope,
    InputAccepted,
    MalformedPayload,
    ProduceOutput,
    TurtleInput,
    TurtleInvariantError,
    TurtleOutput,
)

GENESIS_OUTPUT = TurtleOutput(0, BOTTOM, BOTTOM)

DEFAULT_BATCH_MAX = 8

_CHAIN_WIRE = struct.Struct("<II")  # omitted command count, suffix byte length


class DecodeDeferred(Exception):
    """A relative chain cannot be decoded yet: the receiver's reference chain
    is shorter than the omitted prefix.  Buffer until decisions catch up."""

    def __init__(self, base_length: int):
        super().__init__(f"need {base_length} known commands to decode")
        self.base_length = base_length


@dataclass(frozen=True)
class RelativeChain:
    """A chain with its first `base_length` commands omitted."""

    base_length: int
    suffix: tuple[Command, ...]


def encode_relative(chain: Chain, decided: Chain) -> RelativeChain:
    """Drop the sender's decided prefix from `chain`; requires decided <= chain."""
    if not is_prefix(decided, chain):
        raise ValueError(f"decided chain {decided} is not a prefix of {chain}")
    return RelativeChain(len(decided), chain.commands[len(decided):])


def decode_relative(relative: RelativeChain, known: Chain) -> Chain:
    """Rebuild a relative chain against the receiver's known chain.

    The omitted prefix is taken from `known`, whose first base_length
    commands equal the omitted ones whenever the sender's decided chain and
    the receiver's chain stem from the same composition (turtle agreement
    makes every decided chain a prefix of every later proposal).
    """
    if len(known) < relative.base_length:
        raise DecodeDeferred(relative.base_length)
    return known.prefix(relative.base_length).extend(relative.suffix)


class ChainRegistry:
    """Per-run flyweight for decoded chains: one canonical Chain per encoding."""

    def __init__(self) -> None:
        self._by_blob: dict[bytes, Chain] = {}

    def canonical(self, blob: bytes) -> Chain:
        chain = self._by_blob.get(blob)
        if chain is None:
            chain = decode_chain_blob(blob)
            self._by_blob[chain.blob] = chain
        return chain

    def intern(self, chain: Chain) -> Chain:
        return self._by_blob.setdefault(chain.blob, chain)


class ChainCodec:
    """Per-processor serializer for every chain field in message payloads.

    Wire form is (omitted count: u32, suffix bytes: u32, suffix).  In "full"
    mode nothing is omitted; in "relative" mode outgoing chains omit the
    sender's longest decided chain.  Decoding rebuilds against `known`, the
    receiver's current proposal, and works for either mode.
    """

    def __init__(self, mode: str = "full", registry: ChainRegistry | None = None):
        if mode not in ("full", "relative"):
            raise ValueError(f"unknown codec mode {mode!r}")
        self.mode = mode
        self.registry = registry if registry is not None else ChainRegistry()
        self.decided: Chain = BOTTOM
        self.known: Chain = BOTTOM

    def encode_chain(self, chain: Chain) -> bytes:
        base = self.decided if self.mode == "relative" else BOTTOM
        if not is_prefix(base, chain):
            raise TurtleInvariantError(
                f"outgoing chain {chain} does not extend the decided chain {base}"
            )
        cut = chain.byte_length(len(base))
        suffix = chain.blob[cut:]
        return _CHAIN_WIRE.pack(len(base), len(suffix)) + suffix

    def decode_chain(self, buf: bytes, offset: int = 0) -> tuple[Chain, int]:
        if offset + _CHAIN_WIRE.size > len(buf):
            raise MalformedPayload("truncated chain header")
        base_length, suffix_len = _CHAIN_WIRE.unpack_from(buf, offset)
        offset += _CHAIN_WIRE.size
        if offset + suffix_len > len(buf):
            raise MalformedPayload("truncated chain suffix")
        suffix = buf[offset : offset + suffix_len]
        offset += suffix_len
        if base_length > len(self.known):
            raise DecodeDeferred(base_length)
        blob = self.known.blob[: self.known.byte_length(base_length)] + suffix
        try:
            return self.registry.canonical(blob), offset
        except ValueError as exc:
            raise MalformedPayload(str(exc)) from exc

    def decode_chain_exact(self, buf: bytes) -> Chain:
        chain, end = self.decode_chain(buf, 0)
        if end != len(buf):
            raise MalformedPayload("trailing bytes after chain")
        return chain


class ProposalSource(Protocol):
    """Supplies the next proposal as an extension of the given upper chain."""

    def next_proposal(self, upper: Chain) -> Chain: ...


class CommandFeed:
    """Deterministic per-processor command stream.

    Mints `rate` fresh commands into a pending queue at each proposal and
    appends at most `batch_max` queued commands to the proposal.
    """

    def __init__(self, pid: int, batch_max: int = DEFAULT_BATCH_MAX, rate: int = 1):
        self.pid = pid
        self.batch_max = batch_max
        self.rate = rate
        self._next_seq = 1
        self.pending: deque[Command] = deque()

    def mint_one(self) -> Command:
        cmd = Command(self.pid, self._next_seq)
        self._next_seq += 1
        return cmd

    def next_proposal(self, upper: Chain) -> Chain:
        for _ in range(self.rate):
            self.pending.append(self.mint_one())
        take = min(self.batch_max, len(self.pending))
        batch = [self.pending.popleft() for _ in range(take)]
        return upper.extend(batch)


class EngineError(RuntimeError):
    """The engine was driven outside its contract (stale/future output, ...)."""


# Engine phases.
_AWAITING_LEADER = "awaiting_leader"
_RUNNING = "running"


class SmrEngine:
    """One processor's replication loop: leader phase, turtle instance,
    decision, next proposal.  Owns no clock or network; the simulator drives
    it through begin/on_envelope/on_timer and carries out returned effects
    via the attached context (broadcast, set_timer, trace)."""

    def __init__(
        self,
        pid: int,
        system: QuorumSystem,
        schedule: Callable[[int], str],
        make_turtle: Callable[[str, int], object],
        source: ProposalSource,
        codec: ChainCodec,
        instances: int,
        leader: LeaderConfig = LeaderConfig(),
        mode: str = "crash",
        input_factory: Callable[[int, Chain, object], object] | None = None,
        initial_evidence: object | None = None,
    ):
        if mode not in ("crash", "bft"):
            raise ValueError(f"unknown engine mode {mode!r}")
        self.pid = pid
        self.system = system
        self.schedule = schedule
        self.make_turtle = make_turtle
        self.source = source
        self.codec = codec
        self.instances = instances
        self.leader = leader
        self.mode = mode
        self.input_factory = input_factory or (
            lambda index, chain, evidence: TurtleInput(index, chain)
        )

        self.decision_log: list[tuple[int, Chain]] = []
        self.longest_decided: Chain = BOTTOM
        self.completed_instances = 0
        self.finished = False

        self._ctx = None
        self._current = 0
        self._phase = _RUNNING
        self._turtle = None
        self._own_candidate: Chain = BOTTOM
        self._last_upper: Chain = BOTTOM
        self._last_evidence = initial_evidence
        self._active_timer: int | None = None
        self._prestart: list[Envelope] = []
        self._future: dict[int, list[Envelope]] = {}
        self._deferred: list[Envelope] = []

    def attach(self, ctx) -> None:
        self._ctx = ctx

    # -- driving --------------------------------------------------------

    def begin(self) -> None:
        if self._current != 0:
            raise EngineError("engine already started")
        self._enter_instance(1)

    def on_envelope(self, env: Envelope) -> None:
        if self.finished or env.instance < self._current:
            return  # late: the instance is already complete here
        if env.instance > self._current:
            self._future.setdefault(env.instance, []).append(env)
            return
        if env.round_tag == LEADER_ROUND_TAG:
            self._on_leader_message(env)
            return
        if self._phase == _AWAITING_LEADER:
            self._prestart.append(env)
            return
        self._dispatch(env)

    def on_timer(self, timer_id: int) -> None:
        if self.finished or self._phase != _AWAITING_LEADER:
            return
        if timer_id != self._active_timer:
            return  # stale timer from an earlier instance or after adoption
        self._ctx.trace("timer_expire", proc=self.pid, instance=self._current)
        self._active_timer = None
        self._start_turtle(self._own_candidate)

    # -- instance lifecycle ----------------------------------------------

    def _enter_instance(self, index: int) -> None:
        for env in self._deferred:
            self._ctx.trace(
                "discard",
                proc=self.pid,
                instance=env.instance,
                sender=env.sender,
                reason="undecodable",
            )
        self._deferred.clear()
        self._prestart.clear()
        if index > self.instances:
            self.finished = True
            return
        self._current = index
        self._turtle = None
        self._own_candidate = self.source.next_proposal(self._last_upper)
        self.codec.known = self._own_candidate
        if self.leader.enabled:
            self._phase = _AWAITING_LEADER
            if self.pid == leader_for(index, self.system.n):
                self._ctx.trace(
                    "leader_propose",
                    proc=self.pid,
                    instance=index,
                    chain=self._own_candidate.render(),
                )
                self._ctx.broadcast(
                    index, LEADER_ROUND_TAG, self.codec.encode_chain(self._own_candidate)
                )
            self._active_timer = self._ctx.set_timer(
                timer_length(index, self.leader.initial_timer)
            )
            self._replay(self._future.pop(index, []))
        else:
            self._start_turtle(self._own_candidate)

    def _start_turtle(self, input_chain: Chain) -> None:
        index = self._current
        self._phase = _RUNNING
        self._active_timer = None
        self.codec.known = input_chain
        self._ctx.trace(
            "propose", proc=self.pid, instance=index, chain=input_chain.render()
        )
        self._turtle = self.make_turtle(self.schedule(index), index)
        turtle_input = self.input_factory(index, input_chain, self._last_evidence)
        self._handle_actions(self._turtle.start(turtle_input))
        if self._current == index and self._phase == _RUNNING:
            pending = self._prestart
            self._prestart = []
            self._replay(pending)
        if self._current == index and self._phase == _RUNNING:
            self._replay(self._future.pop(index, []))

    def _replay(self, envelopes: list[Envelope]) -> None:
        for env in envelopes:
            self.on_envelope(env)

    def _on_leader_message(self, env: Envelope) -> None:
        if self._phase != _AWAITING_LEADER:
            return  # the turtle already started; ignore
        if env.sender != leader_for(self._current, self.system.n):
            self._ctx.trace(
                "discard",
                proc=self.pid,
                instance=self._current,
                sender=env.sender,
                reason="not-leader",
            )
            return
        try:
            leader_chain = self.codec.decode_chain_exact(env.payload)
        except MalformedPayload:
            self._ctx.trace(
                "discard",
                proc=self.pid,
                instance=self._current,
                sender=env.sender,
                reason="malformed",
            )
            return
        except DecodeDeferred:
            self._ctx.trace(
                "discard",
                proc=self.pid,
                instance=self._current,
                sender=env.sender,
                reason="undecodable",
            )
            return
        chain, adopted = choose_input(
            self._own_candidate, leader_chain, self._last_upper
        )
        if adopted:
            self._ctx.trace("adopt", proc=self.pid, instance=self._current)
        self._active_timer = None
        self._start_turtle(chain)

    def _dispatch(self, env: Envelope) -> None:
        try:
            actions = self._turtle.on_message(env.sender, env.round_tag, env.payload)
        except DecodeDeferred:
            self._deferred.append(env)
            return
        self._handle_actions(actions)

    def _handle_actions(self, actions) -> None:
        for action in actions:
            if isinstance(action, Broadcast):
                self._ctx.broadcast(self._current, action.round_tag, action.payload)
            elif isinstance(action, InputAccepted):
                self._ctx.trace(
                    "input_ok",
                    proc=self.pid,
                    instance=self._current,
                    sender=action.sender,
                    chain=action.chain.render(),
                )
            elif isinstance(action, Discarded):
                self._ctx.trace(
                    "discard",
                    proc=self.pid,
                    instance=self._current,
                    sender=action.sender,
                    reason=action.reason,
                )
            elif isinstance(action, ProduceOutput):
                self._on_turtle_output(action.output)
            else:
                raise EngineError(f"unknown turtle action {action!r}")

    def _on_turtle_output(self, out) -> None:
        if out.turtle_index != self._current:
            raise EngineError(
                f"output for instance {out.turtle_index} while executing {self._current}"
            )
        index = self._current
        self._ctx.trace(
            "output",
            proc=self.pid,
            instance=index,
            chain=out.decided.render(),
            upper=out.upper.render(),
        )
        if self.mode == "crash" or len(out.decided) > len(self.longest_decided):
            self.decision_log.append((index, out.decided))
            self.longest_decided = out.decided
            self.codec.decided = out.decided
            self._ctx.trace(
                "decide", proc=self.pid, instance=index, chain=out.decided.render()
            )
        self._last_upper = out.upper
        if self.mode == "bft":
            self._last_evidence = out
        self.completed_instances = index
        self._enter_instance(index + 1)


# --- Replicated-state trace properties ---------------------------------------


def _agreement(decides, prefix: str) -> PropertyResult:
    name = f"{prefix}smr-agreement"
    ordered = sorted(decides, key=lambda d: (len(d.chain), d.chain.blob))
    for a, b in zip(ordered, ordered[1:]):
        if not is_prefix(a.chain, b.chain):
            return PropertyResult(
                name,
                False,
                f"decisions diverge: {a.chain} (proc {a.proc}) vs {b.chain} (proc {b.proc})",
                (a.seq, b.seq),
            )
    return PropertyResult(name, True)


def _validity(decides, proposal_chains: Sequence[Chain], prefix: str) -> PropertyResult:
    name = f"{prefix}smr-validity"
    covered: list[Chain] = []
    by_chain: dict[bytes, object] = {}
    for d in decides:
        by_chain.setdefault(d.chain.blob, d)
    for d in sorted(by_chain.values(), key=lambda d: -len(d.chain)):
        if any(is_prefix(d.chain, c) for c in covered):
            continue
        if any(is_prefix(d.chain, c) for c in proposal_chains):
            covered.append(d.chain)
            continue
        return PropertyResult(
            name, False, f"decision {d.chain} extends no proposal", (d.seq,)
        )
    return PropertyResult(name, True)


def _relay(decides, outputs, correct: set[int], prefix: str) -> PropertyResult:
    # "Eventually" is approximated at quiescence, bounded by the last
    # instance completed by every correct processor: decisions made strictly
    # before that bound must be prefixes of every correct processor's final
    # decided chain.
    name = f"{prefix}smr-relay"
    last_completed = {p: 0 for p in correct}
    for o in outputs:
        if o.proc in correct:
            last_completed[o.proc] = max(last_completed[o.proc], o.instance)
    bound = min(last_completed.values(), default=0)
    finals = {p: BOTTOM for p in correct}
    for d in decides:
        if d.proc in correct and len(d.chain) >= len(finals[d.proc]):
            finals[d.proc] = d.chain
    for d in decides:
        if d.proc not in correct or d.instance >= bound:
            continue
        for q in correct:
            if not is_prefix(d.chain, finals[q]):
                return PropertyResult(
                    name,
                    False,
                    f"proc {d.proc} decided {d.chain} at instance {d.instance} but "
                    f"proc {q} ended with {finals[q]}",
                    (d.seq,),
                )
    return PropertyResult(name, True)


def _monotonicity(decides, prefix: str) -> PropertyResult:
    name = f"{prefix}smr-monotonicity"
    last: dict[int, object] = {}
    for d in decides:
        prev = last.get(d.proc)
        if prev is not None and not is_prefix(prev.chain, d.chain):
            return PropertyResult(
                name,
                False,
                f"proc {d.proc} decided {prev.chain} then {d.chain}",
                (prev.seq, d.seq),
            )
        last[d.proc] = d
    return PropertyResult(name, True)


def _decided_prefix_of_later_inputs(outputs, inputs, prefix: str) -> PropertyResult:
    # Equivalent to checking every output against every later input: a chain
    # is a prefix of all chains in a set iff it is a prefix of their meet.
    name = f"{prefix}decided-prefix-of-later-inputs"
    by_instance: dict[int, list[Chain]] = {}
    for i in inputs:
        by_instance.setdefault(i.instance, []).append(i.chain)
    instances_desc = sorted(by_instance, reverse=True)
    suffix_meets: dict[int, Chain] = {}
    running: Chain | None = None
    for inst in instances_desc:
        chains = by_instance[inst] + ([running] if running is not None else [])
        running = meet(chains)
        suffix_meets[inst] = running
    instances_asc = sorted(suffix_meets)
    for o in outputs:
        later = [i for i in instances_asc if i > o.instance]
        if not later:
            continue
        bound = suffix_meets[later[0]]
        if not is_prefix(o.decided, bound):
            bad = next(
                (
                    i
                    for i in inputs
                    if i.instance > o.instance and not is_prefix(o.decided, i.chain)
                ),
                None,
            )
            detail = (
                f"output {o.decided} at instance {o.instance} is not a prefix of "
                f"input {bad.chain} at instance {bad.instance}"
                if bad
                else f"output {o.decided} at instance {o.instance} not below later inputs"
            )
            return PropertyResult(
                name, False, detail, (o.seq,) + ((bad.seq,) if bad else ())
            )
    return PropertyResult(name, True)


def _all_complete(outputs, correct: set[int], instances: int, prefix: str) -> PropertyResult:
    name = f"{prefix}all-correct-complete-each-instance"
    done: dict[int, set[int]] = {p: set() for p in correct}
    for o in outputs:
        if o.proc in correct:
            done[o.proc].add(o.instance)
    expected = set(range(1, instances + 1))
    for p in sorted(correct):
        missing = expected - done[p]
        if missing:
            return PropertyResult(
                name,
                False,
                f"proc {p} produced no output for instances {sorted(missing)[:5]}",
            )
    return PropertyResult(name, True)


def check_smr_trace(
    events: Iterable[Mapping],
    *,
    correct: set[int],
    instances: int,
) -> list[PropertyResult]:
    """Crash-model replication properties over a quiesced trace.

    Checks agreement, validity, relay (bounded), monotonicity, plus the two
    composition facts the construction promises: each output's decided chain
    is a prefix of every later input, and every correct processor completes
    every scheduled instance.  Progress is deliberately not checked here; it
    holds only under the leader wrapper with partial synchrony.
    """
    idx = TraceIndex(events)
    inputs = idx.proposes
    input_chains = [p.chain for p in inputs]
    return [
        _agreement(idx.decides, ""),
        _validity(idx.decides, input_chains, ""),
        _relay(idx.decides, idx.outputs, correct, ""),
        _monotonicity(idx.decides, ""),
        _decided_prefix_of_later_inputs(idx.outputs, inputs, ""),
        _all_complete(idx.outputs, correct, instances, ""),
    ]
