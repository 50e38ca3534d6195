"""Single-decision subprotocol interface and its property checkers.

One turtle instance takes a proposal chain from each participating processor
and yields, at each processor that completes it, a pair (decided, upper):
`decided` is safe to commit and `upper` bounds from below every chain the
processor may propose next.  Four properties make an implementation a valid
turtle: termination for correct processors, agreement (every decided chain is
a prefix of every upper chain), unanimity (a common prefix of all inputs
survives into the outputs), and validity (upper chains come from inputs).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Protocol, Union

from .chain import Chain, is_prefix, meet


class TurtleUsageError(ValueError):
    """A caller violated an interface precondition (e.g. started twice)."""


class TurtleInvariantError(RuntimeError):
    """An internal protocol invariant failed; indicates misconfiguration
    (such as an insufficient quorum intersection degree) or a bug."""


class MalformedPayload(ValueError):
    """A message payload could not be decoded."""


@dataclass(frozen=True)
class TurtleInput:
    turtle_index: int
    chain: Chain


@dataclass(frozen=True)
class TurtleOutput:
    turtle_index: int
    decided: Chain
    upper: Chain

    def __post_init__(self) -> None:
        if not is_prefix(self.decided, self.upper):
            raise TurtleInvariantError(
                f"output decided chain {self.decided} is not a prefix of upper {self.upper}"
            )


@dataclass(frozen=True)
class Broadcast:
    """Send `payload` to every processor (including the sender) under `round_tag`."""

    round_tag: int
    payload: bytes


@dataclass(frozen=True)
class ProduceOutput:
    output: object  # TurtleOutput or a BFT output


@dataclass(frozen=True)
class Discarded:
    """A received message was rejected; `reason` is a stable reason code."""

    reason: str
    sender: int


@dataclass(frozen=True)
class InputAccepted:
    """A received proposal passed validation (emitted by evidence-checking
    protocols so traces record the set of accepted inputs)."""

    sender: int
    chain: Chain


TurtleAction = Union[Broadcast, ProduceOutput, Discarded, InputAccepted]


class TurtleStateMachine(Protocol):
    """Pure, deterministic per-instance protocol logic.

    The simulator owns time and delivery; implementations hold only
    per-instance state and must yield identical actions for identical
    start/on_message call sequences.
    """

    def start(self, turtle_input) -> list[TurtleAction]: ...

    def on_message(self, sender: int, round_tag: int, payload: bytes) -> list[TurtleAction]: ...


@dataclass(frozen=True)
class Envelope:
    """Simulator-internal message envelope (stable for traces):
    {instance: u64, round_tag: u8, sender: u16, payload: bytes}."""

    instance: int
    round_tag: int
    sender: int
    payload: bytes


# --- Checkers ---------------------------------------------------------------


def _require_single_index(outputs: Iterable[TurtleOutput]) -> None:
    indices = {o.turtle_index for o in outputs}
    if len(indices) > 1:
        raise TurtleUsageError(f"outputs span multiple turtle instances: {sorted(indices)}")


def check_turtle_agreement(outputs: Iterable[TurtleOutput]) -> bool:
    """Every decided chain is a prefix of every upper chain (ordered pairs)."""
    outs = list(outputs)
    _require_single_index(outs)
    return all(is_prefix(a.decided, b.upper) for a in outs for b in outs)


def check_turtle_unanimity(
    inputs: Iterable[TurtleInput],
    outputs: Iterable[TurtleOutput],
    mode: str = "crash",
) -> bool:
    """A common prefix of all inputs is a prefix of every decided chain
    (crash mode) or of every upper chain (bft mode)."""
    if mode not in ("crash", "bft"):
        raise TurtleUsageError(f"unknown unanimity mode: {mode!r}")
    common = meet(i.chain for i in inputs)
    if mode == "crash":
        return all(is_prefix(common, o.decided) for o in outputs)
    return all(is_prefix(common, o.upper) for o in outputs)


def check_turtle_validity(
    inputs: Iterable[TurtleInput], outputs: Iterable[TurtleOutput]
) -> bool:
    """Every upper chain is a prefix of some input chain."""
    chains = [i.chain for i in inputs]
    return all(any(is_prefix(o.upper, c) for c in chains) for o in outputs)


def check_turtle_termination(
    started: Iterable[int], finished: Iterable[int], correct: Iterable[int]
) -> bool:
    """At quiescence, every correct processor that started the instance
    produced an output.  Faulty processors are not counted."""
    correct_set = set(correct)
    return set(started) & correct_set <= set(finished) & correct_set
