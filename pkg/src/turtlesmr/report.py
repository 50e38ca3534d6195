"""Machine-readable results for trace property checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .chain import Chain, Command


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    detail: str = ""
    counterexample: tuple[int, ...] = ()  # event seq numbers

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "detail": self.detail,
            "counterexample": list(self.counterexample),
        }


@dataclass
class CheckReport:
    properties: list[PropertyResult] = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.properties)

    def result(self, name: str) -> PropertyResult:
        for p in self.properties:
            if p.name == name:
                return p
        raise KeyError(name)

    def failures(self) -> list[PropertyResult]:
        return [p for p in self.properties if not p.passed]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "properties": [p.to_dict() for p in self.properties],
            "counts": dict(sorted(self.counts.items())),
        }


@dataclass(frozen=True)
class DecideEvent:
    seq: int
    proc: int
    instance: int
    chain: Chain


@dataclass(frozen=True)
class ProposeEvent:
    seq: int
    proc: int
    instance: int
    chain: Chain


@dataclass(frozen=True)
class OutputEvent:
    seq: int
    proc: int
    instance: int
    decided: Chain
    upper: Chain


@dataclass(frozen=True)
class InputOkEvent:
    seq: int
    proc: int
    instance: int
    sender: int
    chain: Chain


class TraceIndex:
    """Chain-level view of a trace: decides, proposals, outputs, and accepted
    inputs with their chains rebuilt from the canonical rendering."""

    def __init__(self, events):
        cache: dict = {}
        self.decides: list[DecideEvent] = []
        self.proposes: list[ProposeEvent] = []
        self.outputs: list[OutputEvent] = []
        self.input_oks: list[InputOkEvent] = []
        for ev in events:
            kind = ev.get("kind")
            if kind == "decide":
                self.decides.append(
                    DecideEvent(
                        ev["seq"], ev["proc"], ev["instance"],
                        chain_from_render(ev["chain"], cache),
                    )
                )
            elif kind == "propose":
                self.proposes.append(
                    ProposeEvent(
                        ev["seq"], ev["proc"], ev["instance"],
                        chain_from_render(ev["chain"], cache),
                    )
                )
            elif kind == "output":
                self.outputs.append(
                    OutputEvent(
                        ev["seq"], ev["proc"], ev["instance"],
                        chain_from_render(ev["chain"], cache),
                        chain_from_render(ev["upper"], cache),
                    )
                )
            elif kind == "input_ok":
                self.input_oks.append(
                    InputOkEvent(
                        ev["seq"], ev["proc"], ev["instance"], ev["sender"],
                        chain_from_render(ev["chain"], cache),
                    )
                )


def correct_processors(events) -> set[int]:
    """Processors that stayed correct for the whole run, per the trace's
    metadata (fault roles) and any crash events actually recorded."""
    n = None
    faulty: set[int] = set()
    for ev in events:
        kind = ev.get("kind")
        if kind == "meta":
            n = ev["n"]
            faulty.update(int(p) for p in ev.get("crashes", {}))
            faulty.update(int(p) for p in ev.get("byzantine", {}))
        elif kind == "crash":
            faulty.add(ev["proc"])
    if n is None:
        raise ValueError("trace has no meta event")
    return set(range(n)) - faulty


def chain_from_render(render: Sequence[str], cache: dict | None = None) -> Chain:
    """Rebuild a chain value from its canonical trace rendering.

    Command ids are unique within a run, so the rendering determines the
    chain up to payload bytes, which no checked property depends on.
    """
    key = tuple(render)
    if cache is not None and key in cache:
        return cache[key]
    commands = []
    for cid in key:
        issuer, _, seq = cid.partition(".")
        commands.append(Command(int(issuer), int(seq)))
    chain = Chain(commands)
    if cache is not None:
        cache[key] = chain
    return chain
