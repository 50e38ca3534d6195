"""Command-line interface and the unified property-check pipeline.

Subcommands: `run` executes a scenario and writes its trace, `check` replays
every applicable property checker over a stored trace, and `sweep` does
run-plus-check across a seed range.  Exit codes are stable for CI: 0 pass,
1 property violation (or truncated run), 2 configuration error, 3 internal
invariant error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from multiprocessing import Pool
from typing import Iterable, Mapping, Sequence

from .bft import check_bft_smr_trace
from .chain import ChainAgreementError
from .config import ConfigError, ScenarioConfig, load_scenario
from .leader import check_progress
from .netsim import Trace, run
from .report import CheckReport, PropertyResult, TraceIndex, correct_processors
from .smr import EngineError, check_smr_trace
from .turtle_core import (
    TurtleInput,
    TurtleInvariantError,
    TurtleOutput,
    check_turtle_agreement,
    check_turtle_termination,
    check_turtle_unanimity,
    check_turtle_validity,
)

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3

OUT_DIR_ENV = "TURTLESMR_OUT_DIR"

# Every event kind any module may emit, with its extra fields.  The schema
# completeness test asserts that recorded traces stay inside this table.
TRACE_SCHEMA: dict[str, str] = {
    "meta": "run header: config echo, fault roles, seed, codec, version",
    "send": "message handed to the network: dest, instance, round, msg, digest",
    "deliver": "message arrives: sender, instance, round, msg, digest",
    "drop": "message discarded by the network: reason (recipient crashed)",
    "crash": "processor halts; it emits nothing afterwards",
    "gst": "global stabilization time reached (partial synchrony)",
    "leader_propose": "instance leader broadcasts its proposal chain",
    "adopt": "processor adopts the leader's chain as its input",
    "timer_expire": "leader wait timed out; processor keeps its own proposal",
    "propose": "processor starts the instance with this input chain",
    "input_ok": "evidence-checking protocol accepted a proposal from sender",
    "discard": "processor rejected a message: reason code",
    "output": "instance completed: decided chain and upper chain",
    "decide": "processor decides a chain",
    "end": "run footer: truncated flag, processed event count",
}

DISCARD_REASONS = (
    "malformed",
    "bad-signature",
    "not-a-quorum",
    "recompute-mismatch",
    "non-agreeing-chains",
    "stale-evidence",
    "bad-evidence",
    "chain-below-evidence",
    "unknown-round",
    "not-leader",
    "undecodable",
)


class TraceFormatError(ValueError):
    """A trace file or event stream is structurally unusable."""


def _events_of(trace) -> list[dict]:
    events = trace.events if isinstance(trace, Trace) else list(trace)
    if not events or events[0].get("kind") != "meta":
        raise TraceFormatError("trace does not start with a meta event")
    return events


def check_turtle_trace(
    events: Iterable[Mapping], *, correct: set[int], mode: str
) -> list[PropertyResult]:
    """Per-instance turtle properties over a quiesced trace.

    Inputs per instance are the proposals actually made (crash model) or the
    proposals correct processors accepted as valid (Byzantine model, where a
    faulty processor's "input" is whatever it got accepted).  Outputs are per
    processor; in the Byzantine model only correct processors' outputs count.
    """
    idx = TraceIndex(events)
    inputs_by_instance: dict[int, list[TurtleInput]] = {}
    if mode == "bft":
        for acc in idx.input_oks:
            if acc.proc in correct:
                inputs_by_instance.setdefault(acc.instance, []).append(
                    TurtleInput(acc.instance, acc.chain)
                )
    else:
        for prop in idx.proposes:
            inputs_by_instance.setdefault(prop.instance, []).append(
                TurtleInput(prop.instance, prop.chain)
            )

    outputs_by_instance: dict[int, list[tuple[int, TurtleOutput]]] = {}
    malformed: PropertyResult | None = None
    for out in idx.outputs:
        if mode == "bft" and out.proc not in correct:
            continue
        try:
            rebuilt = TurtleOutput(out.instance, out.decided, out.upper)
        except TurtleInvariantError:
            malformed = PropertyResult(
                "turtle-agreement",
                False,
                f"proc {out.proc} output at instance {out.instance} has decided "
                "chain not a prefix of its upper chain",
                (out.seq,),
            )
            continue
        outputs_by_instance.setdefault(out.instance, []).append((out.seq, rebuilt))

    started_by_instance: dict[int, set[int]] = {}
    for prop in idx.proposes:
        started_by_instance.setdefault(prop.instance, set()).add(prop.proc)
    finished_by_instance: dict[int, set[int]] = {}
    for out in idx.outputs:
        finished_by_instance.setdefault(out.instance, set()).add(out.proc)

    agreement = malformed or PropertyResult("turtle-agreement", True)
    unanimity = PropertyResult("turtle-unanimity", True)
    validity = PropertyResult("turtle-validity", True)
    termination = PropertyResult("turtle-termination", True)

    instances = sorted(set(inputs_by_instance) | set(outputs_by_instance))
    for instance in instances:
        inputs = inputs_by_instance.get(instance, [])
        tagged = outputs_by_instance.get(instance, [])
        outputs = [o for _, o in tagged]
        seqs = tuple(seq for seq, _ in tagged)
        if agreement.passed and not check_turtle_agreement(outputs):
            agreement = PropertyResult(
                "turtle-agreement", False, f"instance {instance}", seqs
            )
        if inputs and outputs:
            if unanimity.passed and not check_turtle_unanimity(inputs, outputs, mode):
                unanimity = PropertyResult(
                    "turtle-unanimity", False, f"instance {instance}", seqs
                )
            if validity.passed and not check_turtle_validity(inputs, outputs):
                validity = PropertyResult(
                    "turtle-validity", False, f"instance {instance}", seqs
                )
        if termination.passed and not check_turtle_termination(
            started_by_instance.get(instance, set()),
            finished_by_instance.get(instance, set()),
            correct,
        ):
            termination = PropertyResult(
                "turtle-termination",
                False,
                f"instance {instance}: a correct processor started but never output",
            )
    return [agreement, unanimity, validity, termination]


def check_trace(trace, spec: str = "auto") -> CheckReport:
    """Run every property checker applicable to the trace.

    `spec` narrows the property groups: "smr" for replication-level checks,
    "turtle" for per-instance checks, "bft" for both on a Byzantine trace,
    "auto" for everything the trace's metadata calls for.
    """
    events = _events_of(trace)
    meta = events[0]
    mode = meta["mode"]
    if spec not in ("auto", "smr", "turtle", "bft"):
        raise TraceFormatError(f"unknown check spec {spec!r}")
    if spec == "bft" and mode != "bft":
        raise TraceFormatError("--spec bft requires a trace from a Byzantine schedule")
    correct = correct_processors(events)
    instances = meta["instances"]
    properties: list[PropertyResult] = []

    if spec in ("auto", "smr", "bft"):
        if mode == "bft":
            properties.extend(
                check_bft_smr_trace(events, correct=correct, instances=instances)
            )
        else:
            properties.extend(
                check_smr_trace(events, correct=correct, instances=instances)
            )
        if meta["leader"]["enabled"] and meta["sync"]["mode"] == "partial_sync":
            properties.append(
                check_progress(
                    events,
                    correct=correct,
                    n=meta["n"],
                    instances=instances,
                    delta=meta["sync"]["delta"],
                    gst=meta["sync"]["gst"],
                    initial_timer=meta["leader"]["t0"],
                )
            )
    if spec in ("auto", "turtle", "bft"):
        properties.extend(check_turtle_trace(events, correct=correct, mode=mode))

    counts = {
        "events": len(events),
        "instances": instances,
        "processors": meta["n"],
        "decisions": sum(1 for ev in events if ev.get("kind") == "decide"),
        "discards": sum(1 for ev in events if ev.get("kind") == "discard"),
        "truncated": bool(events[-1].get("truncated")),
    }
    return CheckReport(properties, counts)


def run_scenario(config: ScenarioConfig, spec: str = "auto") -> tuple[Trace, CheckReport]:
    trace = run(config)
    return trace, check_trace(trace, spec)


@dataclass(frozen=True)
class SweepResult:
    seed: int
    passed: bool
    truncated: bool
    failures: tuple[str, ...]
    trace_sha256: str


def _sweep_one(args: tuple[ScenarioConfig, int]) -> SweepResult:
    config, seed = args
    trace, report = run_scenario(config.with_seed(seed))
    return SweepResult(
        seed,
        report.passed and not trace.truncated,
        trace.truncated,
        tuple(p.name for p in report.failures()),
        trace.sha256(),
    )


def sweep(
    config: ScenarioConfig, seeds: Sequence[int], parallelism: int = 1
) -> list[SweepResult]:
    """Run and check the scenario once per seed; scenarios are isolated, so
    only this outer loop is ever parallel."""
    jobs = [(config, seed) for seed in seeds]
    if parallelism > 1:
        with Pool(parallelism) as pool:
            return pool.map(_sweep_one, jobs)
    return [_sweep_one(job) for job in jobs]


# --- CLI ----------------------------------------------------------------------


def _parse_seed_range(text: str) -> list[int]:
    first, sep, last = text.partition("..")
    try:
        if sep:
            lo, hi = int(first), int(last)
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(first)]
    except ValueError:
        raise ConfigError(f"invalid seed range {text!r}; expected A..B") from None


def _print_report(report: CheckReport, out=sys.stdout) -> None:
    for prop in report.properties:
        status = "PASS" if prop.passed else "FAIL"
        extra = f"  ({prop.detail})" if prop.detail and not prop.passed else ""
        print(f"{status} {prop.name}{extra}", file=out)


def _cmd_run(args) -> int:
    config = load_scenario(args.config, violate_model=args.violate_model)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    trace = run(config)
    out_path = args.out
    if out_path is None:
        out_dir = os.environ.get(OUT_DIR_ENV, ".")
        out_path = os.path.join(out_dir, f"trace-seed{config.seed}.jsonl")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(trace.to_jsonl())
    print(f"trace written to {out_path} ({len(trace.events)} events)")
    if trace.truncated:
        print("run truncated: event budget exhausted before quiescence")
        return EXIT_VIOLATION
    return EXIT_OK


def _cmd_check(args) -> int:
    try:
        with open(args.trace, "r", encoding="utf-8") as fh:
            trace = Trace.from_jsonl(fh.read())
    except OSError as exc:
        print(f"cannot read trace: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"trace parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = check_trace(trace, args.spec)
    _print_report(report)
    model_conforming = not trace.meta.get("violate_model", False)
    if not report.passed and model_conforming:
        return EXIT_VIOLATION
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config = load_scenario(args.config, violate_model=args.violate_model)
    seeds = _parse_seed_range(args.seeds)
    results = sweep(config, seeds, parallelism=args.parallel)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} seeds passed")
    for r in failed:
        reason = ", ".join(r.failures) or ("truncated" if r.truncated else "unknown")
        print(f"seed {r.seed}: FAIL ({reason})")
    return EXIT_VIOLATION if failed else EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="turtlesmr",
        description="Replicated state machine simulator and property checker",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a scenario and write its trace")
    run_p.add_argument("--config", required=True, help="scenario JSON path")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--out", default=None, help=f"trace path (default ${OUT_DIR_ENV})")
    run_p.add_argument(
        "--violate-model",
        action="store_true",
        help="allow more faults than f; the trace is marked model-violating",
    )
    run_p.set_defaults(func=_cmd_run)

    check_p = sub.add_parser("check", help="check every property over a stored trace")
    check_p.add_argument("--trace", required=True, help="trace JSONL path")
    check_p.add_argument(
        "--spec", choices=("auto", "smr", "turtle", "bft"), default="auto"
    )
    check_p.set_defaults(func=_cmd_check)

    sweep_p = sub.add_parser("sweep", help="run + check across a seed range")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--seeds", required=True, help="inclusive range A..B")
    sweep_p.add_argument("--parallel", type=int, default=1)
    sweep_p.add_argument("--violate-model", action="store_true")
    sweep_p.set_defaults(func=_cmd_sweep)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceFormatError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TurtleInvariantError, EngineError, ChainAgreementError) as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
