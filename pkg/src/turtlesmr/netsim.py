"""Deterministic discrete-event simulation of the replication protocols.

Time is integer simulated units and there is no wall clock anywhere.  The
network is reliable (every message gets a finite delay), asynchronous (delays
are drawn from a seeded heavy-tailed distribution with no bound on spread),
and honest (a delivery always corresponds to one prior send with identical
bytes).  Partial-synchrony mode clips every delivery to land within delta of
max(send time, GST).  Identical (config, seed) pairs produce byte-identical
traces.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field

from .bft import (
    ADVERSARY_STRATEGIES,
    BFT_GENESIS,
    AdversaryEngine,
    BftInput,
    BftLowerBoundTurtle,
    BftOneStepTurtle,
    SignatureLedger,
    Signer,
)
from .config import ScenarioConfig
from .leader import LeaderConfig
from .lowerbound import LowerBoundTurtle
from .onestep import OneStepTurtle
from .smr import ChainCodec, ChainRegistry, CommandFeed, SmrEngine
from .turtle_core import Envelope

# Internal event tags; heap entries are (time, seq, tag, data).
_START = 0
_DELIVER = 1
_TIMER = 2
_CRASH = 3
_GST = 4


@dataclass(frozen=True)
class _Message:
    msg_id: int
    sender: int
    dest: int
    instance: int
    round_tag: int
    payload: bytes
    digest: str


@dataclass
class Trace:
    """A replayable record of one run: a list of JSON-serializable events."""

    events: list[dict] = field(default_factory=list)

    @property
    def meta(self) -> dict:
        if not self.events or self.events[0].get("kind") != "meta":
            raise ValueError("trace has no meta event")
        return self.events[0]

    @property
    def truncated(self) -> bool:
        return bool(self.events) and bool(self.events[-1].get("truncated"))

    def to_jsonl(self) -> str:
        return (
            "\n".join(
                json.dumps(ev, sort_keys=True, separators=(",", ":"))
                for ev in self.events
            )
            + "\n"
        )

    @classmethod
    def from_jsonl(cls, text: str) -> "Trace":
        events = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                events.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"trace line {lineno}: invalid JSON ({exc})") from exc
        return cls(events)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_jsonl().encode("utf-8")).hexdigest()


def async_delay(rng: random.Random, preset: str) -> int:
    """Finite but heavy-tailed integer delay for asynchronous delivery."""
    if preset == "reorder-heavy":
        delay = rng.randrange(1, 40)
        if rng.random() < 0.25:
            delay *= rng.randrange(2, 20)
        return delay
    delay = rng.randrange(1, 10)
    if rng.random() < 0.1:
        delay *= rng.randrange(2, 30)
    return delay


def deliver_delay(config: ScenarioConfig, rng: random.Random, send_time: int) -> int:
    """Delivery delay per the scenario's synchrony mode.

    Async: unbounded-in-distribution but always finite (the network is
    reliable).  Partial synchrony: after GST delays are uniform in [1, delta];
    before GST the raw async delay is clipped so arrival <= gst + delta.
    """
    if config.sync_mode == "async":
        return async_delay(rng, config.preset)
    if send_time >= config.gst:
        return rng.randrange(1, config.delta + 1)
    raw = async_delay(rng, config.preset)
    return min(raw, config.gst + config.delta - send_time)


class _EngineContext:
    """Per-processor view of the simulator handed to an engine."""

    def __init__(self, sim: "_Sim", pid: int):
        self.sim = sim
        self.pid = pid

    def broadcast(self, instance: int, round_tag: int, payload: bytes) -> None:
        digest = self.sim.payload_digest(payload)
        for dest in range(self.sim.config.n):
            self.sim.send_message(self.pid, dest, instance, round_tag, payload, digest)

    def send(self, dest: int, instance: int, round_tag: int, payload: bytes) -> None:
        digest = self.sim.payload_digest(payload)
        self.sim.send_message(self.pid, dest, instance, round_tag, payload, digest)

    def set_timer(self, delay: int) -> int:
        return self.sim.set_timer(self.pid, delay)

    def trace(self, kind: str, **fields) -> None:
        self.sim.trace(kind, **fields)


class _Sim:
    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.rng = random.Random(config.seed)
        self.now = 0
        self.heap: list = []
        self.heap_seq = 0
        self.msg_seq = 0
        self.timer_seq = 0
        self.crashed: set[int] = set()
        self.trace_events: list[dict] = []
        self.engines: dict[int, object] = {}

    # -- event plumbing ---------------------------------------------------

    def push(self, time: int, tag: int, data) -> None:
        heapq.heappush(self.heap, (time, self.heap_seq, tag, data))
        self.heap_seq += 1

    def trace(self, kind: str, **fields) -> None:
        event = {"t": self.now, "seq": len(self.trace_events), "kind": kind}
        event.update(fields)
        self.trace_events.append(event)

    def payload_digest(self, payload: bytes) -> str:
        return hashlib.sha256(payload).hexdigest()[:16]

    def send_message(
        self, sender: int, dest: int, instance: int, round_tag: int,
        payload: bytes, digest: str,
    ) -> None:
        msg = _Message(self.msg_seq, sender, dest, instance, round_tag, payload, digest)
        self.msg_seq += 1
        # A broadcast reaches the sender itself with no delay.
        delay = 0 if dest == sender else deliver_delay(self.config, self.rng, self.now)
        self.trace(
            "send",
            proc=sender,
            dest=dest,
            instance=instance,
            round=round_tag,
            msg=msg.msg_id,
            digest=digest,
        )
        self.push(self.now + delay, _DELIVER, msg)

    def set_timer(self, pid: int, delay: int) -> int:
        timer_id = self.timer_seq
        self.timer_seq += 1
        self.push(self.now + delay, _TIMER, (pid, timer_id))
        return timer_id

    # -- dispatch ---------------------------------------------------------

    def dispatch(self, tag: int, data) -> None:
        if tag == _START:
            if data not in self.crashed:
                self.engines[data].begin()
        elif tag == _DELIVER:
            msg: _Message = data
            if msg.dest in self.crashed:
                self.trace(
                    "drop",
                    proc=msg.dest,
                    sender=msg.sender,
                    instance=msg.instance,
                    round=msg.round_tag,
                    msg=msg.msg_id,
                    digest=msg.digest,
                    reason="recipient-crashed",
                )
                return
            self.trace(
                "deliver",
                proc=msg.dest,
                sender=msg.sender,
                instance=msg.instance,
                round=msg.round_tag,
                msg=msg.msg_id,
                digest=msg.digest,
            )
            self.engines[msg.dest].on_envelope(
                Envelope(msg.instance, msg.round_tag, msg.sender, msg.payload)
            )
        elif tag == _TIMER:
            pid, timer_id = data
            if pid not in self.crashed:
                self.engines[pid].on_timer(timer_id)
        elif tag == _CRASH:
            self.crashed.add(data)
            self.trace("crash", proc=data)
        elif tag == _GST:
            self.trace("gst")


def build_engine(config: ScenarioConfig, pid: int, registry: ChainRegistry,
                 ledger: SignatureLedger | None):
    """Wire up one processor: codec, command feed, turtle factory, engine,
    and, for a Byzantine role, the adversary wrapper around it."""
    system = config.system()
    codec = ChainCodec(config.codec, registry)
    feed = CommandFeed(pid, config.batch_max, config.command_rate)
    leader = LeaderConfig(config.leader_enabled, config.leader_t0)

    if config.mode == "bft":
        assert ledger is not None
        signer = Signer(ledger, pid)

        def make_turtle(kind: str, index: int):
            prev_kind = config.kind_for_instance(index - 1) if index > 1 else ""
            if kind == BftOneStepTurtle.KIND:
                return BftOneStepTurtle(system, codec, signer, ledger, index, prev_kind)
            if kind == BftLowerBoundTurtle.KIND:
                return BftLowerBoundTurtle(system, codec, signer, ledger, index, prev_kind)
            raise ValueError(f"unknown turtle kind {kind!r}")

        engine = SmrEngine(
            pid, system, config.kind_for_instance, make_turtle, feed, codec,
            config.instances, leader, mode="bft",
            input_factory=lambda index, chain, evidence: BftInput(index, chain, evidence),
            initial_evidence=BFT_GENESIS,
        )
        strategy_name = config.byzantine.get(pid)
        if strategy_name is not None:
            strategy = ADVERSARY_STRATEGIES[strategy_name]()
            return AdversaryEngine(engine, strategy, signer, codec, feed)
        return engine

    def make_turtle(kind: str, index: int):
        if kind == "onestep":
            return OneStepTurtle(system, codec, index)
        if kind == "lowerbound":
            return LowerBoundTurtle(system, codec, index)
        raise ValueError(f"unknown turtle kind {kind!r}")

    return SmrEngine(
        pid, system, config.kind_for_instance, make_turtle, feed, codec,
        config.instances, leader, mode="crash",
    )


def run(config: ScenarioConfig) -> Trace:
    """Execute a scenario to quiescence (or the event budget) and return the
    trace.  Identical (config, seed) pairs yield byte-identical traces."""
    sim = _Sim(config)
    registry = ChainRegistry()
    ledger = SignatureLedger() if config.mode == "bft" else None

    for pid in range(config.n):
        engine = build_engine(config, pid, registry, ledger)
        engine.attach(_EngineContext(sim, pid))
        sim.engines[pid] = engine

    sim.trace("meta", **config.meta())
    for pid in sorted(config.crashes):
        sim.push(config.crashes[pid], _CRASH, pid)
    if config.sync_mode == "partial_sync":
        sim.push(config.gst, _GST, None)
    for pid in range(config.n):
        sim.push(0, _START, pid)

    budget = config.event_budget()
    processed = 0
    truncated = False
    while sim.heap:
        if processed >= budget:
            truncated = True
            break
        time, _, tag, data = heapq.heappop(sim.heap)
        sim.now = time
        processed += 1
        sim.dispatch(tag, data)

    sim.trace("end", truncated=truncated, processed=processed)
    return Trace(sim.trace_events)
