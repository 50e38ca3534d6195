"""Scenario configuration: strict JSON schema and cross-field validation.

Unknown keys are errors so that a typo cannot silently weaken a scenario.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping

from . import bft, lowerbound, onestep
from .quorum import QuorumConfigError, QuorumSystem, make_threshold


class ConfigError(ValueError):
    """The scenario description is invalid."""


REQUIRED_INTERSECTION = {
    onestep.KIND: onestep.REQUIRED_INTERSECTION,
    lowerbound.KIND: lowerbound.REQUIRED_INTERSECTION,
    bft.BftOneStepTurtle.KIND: bft.BftOneStepTurtle.REQUIRED_INTERSECTION,
    bft.BftLowerBoundTurtle.KIND: bft.BftLowerBoundTurtle.REQUIRED_INTERSECTION,
}
BFT_KINDS = {bft.BftOneStepTurtle.KIND, bft.BftLowerBoundTurtle.KIND}

ASYNC_PRESETS = ("default", "reorder-heavy")
CODECS = ("full", "relative")


def _require_keys(raw: Mapping, allowed: set[str], where: str) -> None:
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")


def _require_int(value, name: str, minimum: int | None = None) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return value


@dataclass(frozen=True)
class ScenarioConfig:
    n: int
    f: int
    k: int
    schedule: tuple[tuple[str, int], ...]  # (kind, repeat), cycled forever
    instances: int
    sync_mode: str = "async"  # "async" | "partial_sync"
    preset: str = "default"
    gst: int = 0
    delta: int = 1
    crashes: dict[int, int] = field(default_factory=dict)
    byzantine: dict[int, str] = field(default_factory=dict)
    leader_enabled: bool = False
    leader_t0: int = 10
    batch_max: int = 8
    command_rate: int = 1
    codec: str = "full"
    seed: int = 0
    max_events: int | None = None
    violate_model: bool = False

    def system(self) -> QuorumSystem:
        try:
            return make_threshold(self.n, self.f, self.k)
        except QuorumConfigError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def mode(self) -> str:
        return "bft" if self.schedule[0][0] in BFT_KINDS else "crash"

    def kind_for_instance(self, instance: int) -> str:
        expanded = []
        for kind, repeat in self.schedule:
            expanded.extend([kind] * repeat)
        return expanded[(instance - 1) % len(expanded)]

    def event_budget(self) -> int:
        if self.max_events is not None:
            return self.max_events
        return 10_000 + self.instances * self.n * self.n * 30

    def meta(self) -> dict:
        return {
            "version": 1,
            "n": self.n,
            "f": self.f,
            "k": self.k,
            "mode": self.mode,
            "schedule": [[kind, repeat] for kind, repeat in self.schedule],
            "instances": self.instances,
            "sync": {
                "mode": self.sync_mode,
                "preset": self.preset,
                "gst": self.gst,
                "delta": self.delta,
            },
            "crashes": {str(p): t for p, t in sorted(self.crashes.items())},
            "byzantine": {str(p): s for p, s in sorted(self.byzantine.items())},
            "leader": {"enabled": self.leader_enabled, "t0": self.leader_t0},
            "batch_max": self.batch_max,
            "command_rate": self.command_rate,
            "codec": self.codec,
            "seed": self.seed,
            "violate_model": self.violate_model,
        }

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return ScenarioConfig(**{**self.__dict__, "seed": seed})


_TOP_KEYS = {
    "n", "f", "k", "schedule", "instances", "sync", "faults", "leader",
    "batch_max", "command_rate", "codec", "seed", "max_events",
}


def scenario_from_dict(raw: Mapping, violate_model: bool = False) -> ScenarioConfig:
    _require_keys(raw, _TOP_KEYS, "config")
    for key in ("n", "f", "k", "schedule", "instances"):
        if key not in raw:
            raise ConfigError(f"missing required config key: {key}")

    n = _require_int(raw["n"], "n", 1)
    f = _require_int(raw["f"], "f", 0)
    k = _require_int(raw["k"], "k", 1)
    instances = _require_int(raw["instances"], "instances", 1)

    schedule_raw = raw["schedule"]
    if not isinstance(schedule_raw, list) or not schedule_raw:
        raise ConfigError("schedule must be a non-empty list")
    schedule: list[tuple[str, int]] = []
    for entry in schedule_raw:
        if not isinstance(entry, Mapping):
            raise ConfigError(f"schedule entries must be objects, got {entry!r}")
        _require_keys(entry, {"kind", "repeat"}, "schedule entry")
        kind = entry.get("kind")
        if kind not in REQUIRED_INTERSECTION:
            raise ConfigError(
                f"unknown turtle kind {kind!r}; known: {sorted(REQUIRED_INTERSECTION)}"
            )
        repeat = _require_int(entry.get("repeat", 1), "schedule repeat", 1)
        schedule.append((kind, repeat))

    kinds = {kind for kind, _ in schedule}
    bft_kinds = kinds & BFT_KINDS
    if bft_kinds and kinds - BFT_KINDS:
        raise ConfigError(
            "crash-tolerant and Byzantine turtle kinds cannot share a schedule"
        )
    for kind in sorted(kinds):
        required = REQUIRED_INTERSECTION[kind]
        if k < required:
            raise ConfigError(
                f"{kind} turtle requires a quorum system with "
                f"{required}-intersection (k >= {required}); configured k={k}"
            )

    sync_raw = raw.get("sync", {"mode": "async"})
    _require_keys(sync_raw, {"mode", "preset", "gst", "delta"}, "sync")
    sync_mode = sync_raw.get("mode", "async")
    preset = sync_raw.get("preset", "default")
    gst = _require_int(sync_raw.get("gst", 0), "sync.gst", 0)
    delta = _require_int(sync_raw.get("delta", 1), "sync.delta", 1)
    if sync_mode not in ("async", "partial_sync"):
        raise ConfigError(f"unknown sync mode {sync_mode!r}")
    if preset not in ASYNC_PRESETS:
        raise ConfigError(f"unknown async preset {preset!r}; known: {ASYNC_PRESETS}")

    faults_raw = raw.get("faults", {})
    _require_keys(faults_raw, {"crashes", "byzantine"}, "faults")
    crashes: dict[int, int] = {}
    for pid_str, t in faults_raw.get("crashes", {}).items():
        pid = _require_int(int(pid_str), "crash processor id", 0)
        if pid >= n:
            raise ConfigError(f"crash processor id {pid} out of range [0, {n})")
        crashes[pid] = _require_int(t, "crash time", 0)
    byzantine: dict[int, str] = {}
    for pid_str, strategy in faults_raw.get("byzantine", {}).items():
        pid = _require_int(int(pid_str), "byzantine processor id", 0)
        if pid >= n:
            raise ConfigError(f"byzantine processor id {pid} out of range [0, {n})")
        if strategy not in bft.ADVERSARY_STRATEGIES:
            raise ConfigError(
                f"unknown adversary strategy {strategy!r}; "
                f"known: {sorted(bft.ADVERSARY_STRATEGIES)}"
            )
        byzantine[pid] = strategy
    if byzantine and not bft_kinds:
        raise ConfigError("byzantine processors require a Byzantine turtle schedule")
    if set(crashes) & set(byzantine):
        raise ConfigError("a processor cannot be both crashed and byzantine")
    faulty = len(crashes) + len(byzantine)
    if faulty > f and not violate_model:
        raise ConfigError(
            f"{faulty} faulty processors exceed the bound f={f}; "
            "pass --violate-model to run anyway"
        )

    leader_raw = raw.get("leader", {})
    _require_keys(leader_raw, {"enabled", "t0"}, "leader")
    leader_enabled = bool(leader_raw.get("enabled", False))
    leader_t0 = _require_int(leader_raw.get("t0", 10), "leader.t0", 1)

    codec = raw.get("codec", "full")
    if codec not in CODECS:
        raise ConfigError(f"unknown codec {codec!r}; known: {CODECS}")

    config = ScenarioConfig(
        n=n,
        f=f,
        k=k,
        schedule=tuple(schedule),
        instances=instances,
        sync_mode=sync_mode,
        preset=preset,
        gst=gst,
        delta=delta,
        crashes=crashes,
        byzantine=byzantine,
        leader_enabled=leader_enabled,
        leader_t0=leader_t0,
        batch_max=_require_int(raw.get("batch_max", 8), "batch_max", 0),
        command_rate=_require_int(raw.get("command_rate", 1), "command_rate", 0),
        codec=codec,
        seed=_require_int(raw.get("seed", 0), "seed"),
        max_events=(
            _require_int(raw["max_events"], "max_events", 1)
            if raw.get("max_events") is not None
            else None
        ),
        violate_model=violate_model,
    )
    config.system()  # validates n > k*f
    return config


def load_scenario(path: str, violate_model: bool = False) -> ScenarioConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return scenario_from_dict(raw, violate_model=violate_model)
