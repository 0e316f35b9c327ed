"""Batch front door: ``srv6edge run <config> <scenario>`` and ``srv6edge validate <config>``.

Exit codes: 0 when every assertion holds, 1 when any fails, 2 on input errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .config import (
    Assertion,
    ConfigDocument,
    ConfigError,
    Scenario,
    _path,
    address,
    load_config,
    load_scenario,
    payloads,
    validate,
)
from .controller import PolicyEntry
from .sim import LimitExceeded, NodeKind, SimError, Simulator, TraceEvent

EXIT_PASS, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


@dataclass
class CheckResult:
    assertion: Assertion | None
    ok: bool
    observed: str
    evidence: list[TraceEvent] = field(default_factory=list)

    def line(self, origin: str) -> str:
        status = "PASS" if self.ok else "FAIL"
        if self.assertion is None:
            return f"{status} {self.observed}"
        where = f"{origin}:{self.assertion.line}"
        return f"{status} {where}: {self.assertion.text} ({self.observed})"


@dataclass
class Report:
    origin: str
    results: list[CheckResult]
    sim: Simulator

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.results)

    def render(self) -> str:
        out = []
        for r in self.results:
            out.append(r.line(self.origin))
            for ev in r.evidence[:3]:
                out.append("    " + ev.to_line())
        passed = sum(r.ok for r in self.results)
        out.append(f"{passed}/{len(self.results)} assertions passed")
        return "\n".join(out)


class ScenarioError(Exception):
    pass


def schedule_scenario(sim: Simulator, scenario: Scenario) -> None:
    """Queue every scenario event; raises ScenarioError with the line on bad input."""
    for ev in sorted(scenario.events, key=lambda e: e.tick):
        where = f"{scenario.origin}:{ev.line}"
        a = ev.args
        try:
            if ev.verb == "inject":
                interval = int(a.get("interval", "1"))
                for i, data in enumerate(payloads(a)):
                    at = ev.tick + i * interval
                    if "host" in a:
                        sim.inject_downlink(
                            a["host"], address(_need(a, "dst")), data, at=at,
                            sport=int(a.get("sport", "7")), dport=int(a.get("dport", "40000")),
                        )
                    else:
                        dst = address(a["dst"]) if "dst" in a else None
                        sim.inject_pdu(
                            _need(a, "ue"), _need(a, "session"), data, at=at, dst=dst,
                            sport=int(a.get("sport", "40000")), dport=int(a.get("dport", "7")),
                        )
            elif ev.verb == "establish":
                sim.establish(_need(a, "session"), at=ev.tick)
            elif ev.verb == "delete":
                sim.delete(_need(a, "session"), at=ev.tick)
            elif ev.verb == "modify":
                changes = {k: v for k, v in a.items() if k != "session"}
                if "dl_teid" in changes:
                    changes["dl_teid"] = int(changes["dl_teid"], 0)
                sim.modify(_need(a, "session"), at=ev.tick, **changes)
            elif ev.verb == "handover":
                sim.trigger_handover(_need(a, "ue"), _need(a, "to"), at=ev.tick)
            elif ev.verb == "policy-update":
                ni = _need(a, "ni")
                if a.get("remove") in ("yes", "true", "1"):
                    entry = None
                else:
                    path = _path(_need(a, "path"))
                    down = tuple(_path(a["downlink"])) if "downlink" in a else None
                    entry = PolicyEntry(_need(a, "gateway"), path, down)
                sim.update_policy(ni, entry, at=ev.tick)
        except (SimError, ValueError, KeyError) as exc:
            raise ScenarioError(f"{where}: {ev.verb}: {exc}") from None


def _need(args: dict[str, str], key: str) -> str:
    if key not in args:
        raise KeyError(f"missing {key!r}")
    return args[key]


def _bounds(args: dict[str, str], default_min: int | None = 1) -> tuple[int | None, int | None]:
    if "count" in args:
        n = int(args["count"])
        return n, n
    lo = int(args["min"]) if "min" in args else None
    hi = int(args["max"]) if "max" in args else None
    if lo is None and hi is None:
        lo = default_min
    return lo, hi


def _within(n: int, lo: int | None, hi: int | None) -> bool:
    return (lo is None or n >= lo) and (hi is None or n <= hi)


def _describe(lo: int | None, hi: int | None) -> str:
    if lo == hi:
        return f"== {lo}"
    parts = []
    if lo is not None:
        parts.append(f">= {lo}")
    if hi is not None:
        parts.append(f"<= {hi}")
    return " and ".join(parts)


def _in_window(ev: TraceEvent, args: dict[str, str]) -> bool:
    if "after" in args and ev.time <= int(args["after"]):
        return False
    if "before" in args and ev.time >= int(args["before"]):
        return False
    return True


def check_targets(sim: Simulator, scenario: Scenario) -> list[str]:
    """Every node an assertion names must exist."""
    problems = []
    known = set(sim.nodes) | set(sim.ues)
    kinds = {k.value for k in NodeKind}
    for a in scenario.assertions:
        for key in ("at", "via", "node"):
            if key in a.args and a.args[key] not in known:
                problems.append(f"{scenario.origin}:{a.line}: unknown node {a.args[key]!r}")
        if "kind" in a.args and a.args["kind"] not in kinds:
            problems.append(f"{scenario.origin}:{a.line}: unknown node kind {a.args['kind']!r}")
        if a.check == "census" and ("kind" in a.args) == ("node" in a.args):
            problems.append(f"{scenario.origin}:{a.line}: census needs exactly one of kind= or node=")
        if a.check == "dropped" and "reason" not in a.args:
            problems.append(f"{scenario.origin}:{a.line}: dropped needs reason=")
        for key in ("count", "min", "max", "after", "before"):
            if key in a.args:
                try:
                    int(a.args[key])
                except ValueError:
                    problems.append(f"{scenario.origin}:{a.line}: {key} must be an integer")
    return problems


def evaluate(sim: Simulator, a: Assertion) -> CheckResult:
    args = a.args
    if a.check == "delivered":
        hits = [
            e
            for e in sim.trace
            if e.action == "deliver"
            and e.node == args.get("at", e.node)
            and ("via" not in args or e.peer == args["via"])
            and _in_window(e, args)
        ]
        if "payload" in args:
            want = args["payload"].encode()
            hits = [e for e in hits if e.packet is not None and e.packet.endswith(want)]
        lo, hi = _bounds(args)
        return CheckResult(a, _within(len(hits), lo, hi), f"{len(hits)} deliveries, want {_describe(lo, hi)}", hits)
    if a.check == "dropped":
        hits = [
            e
            for e in sim.trace
            if e.action == "drop"
            and e.reason == args["reason"]
            and e.node == args.get("at", e.node)
            and _in_window(e, args)
        ]
        lo, hi = _bounds(args)
        return CheckResult(a, _within(len(hits), lo, hi), f"{len(hits)} drops, want {_describe(lo, hi)}", hits)
    if a.check == "visits":
        hits = [e for e in sim.trace if e.action == "recv" and e.node == args["node"] and _in_window(e, args)]
        lo, hi = _bounds(args)
        return CheckResult(a, _within(len(hits), lo, hi), f"{len(hits)} visits, want {_describe(lo, hi)}", hits)
    if a.check == "census":
        what = args.get("field", "entries")
        if "kind" in args:
            value = sim.census_by_kind()[args["kind"]].get(what)
        else:
            value = sim.snapshot_state()[args["node"]].get(what)
        if value is None:
            return CheckResult(a, False, f"no census field {what!r}")
        lo, hi = _bounds(args, default_min=None)
        return CheckResult(a, _within(value, lo, hi), f"{what} = {value}, want {_describe(lo, hi)}")
    if a.check == "peers":
        n = len(sim.smf.peers) if sim.smf else 0
        lo, hi = _bounds(args)
        return CheckResult(a, _within(n, lo, hi), f"{n} PFCP peers, want {_describe(lo, hi)}")
    if a.check == "associations":
        n = len(sim.smf.associated) if sim.smf else 0
        lo, hi = _bounds(args)
        return CheckResult(a, _within(n, lo, hi), f"{n} associations, want {_describe(lo, hi)}")
    raise AssertionError(a.check)


def run_scenario(doc: ConfigDocument, scenario: Scenario, max_ticks: int = 100_000) -> Report:
    """Build, schedule, run and evaluate.  Raises ConfigError/ScenarioError on bad input."""
    try:
        sim = Simulator(doc.topology)
    except SimError as exc:
        raise ScenarioError(f"{doc.origin}: {exc}") from None
    problems = check_targets(sim, scenario)
    if problems:
        raise ScenarioError("\n".join(problems))
    schedule_scenario(sim, scenario)
    results = []
    try:
        sim.run_until_idle(max_ticks)
    except LimitExceeded as exc:
        results.append(CheckResult(None, False, f"run did not settle: {exc}"))
    results += [evaluate(sim, a) for a in scenario.assertions]
    return Report(scenario.origin, results, sim)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srv6edge", description="SRv6 edge-access user plane simulator")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario against a configuration")
    run.add_argument("config")
    run.add_argument("scenario")
    run.add_argument("--trace", metavar="PATH", help="write the trace as TSV")
    run.add_argument("--hex", action="store_true", help="append a hex packet dump column to the trace")
    run.add_argument("--max-ticks", type=int, default=100_000, metavar="N")
    val = sub.add_parser("validate", help="check a configuration file")
    val.add_argument("config")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            print(f"{args.config}: {exc.strerror}", file=sys.stderr)
            return EXIT_INPUT
        problems = validate(text, args.config)
        for line in problems:
            print(line, file=sys.stderr)
        if problems:
            return EXIT_INPUT
        print(f"{args.config}: ok")
        return EXIT_PASS
    try:
        doc = load_config(args.config)
        scenario = load_scenario(args.scenario)
        report = run_scenario(doc, scenario, args.max_ticks)
    except (ConfigError, ScenarioError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_INPUT
    print(report.render())
    if args.trace:
        n = report.sim.export_trace(args.trace, hex_dump=args.hex)
        print(f"wrote {n} trace events to {args.trace}")
    return EXIT_PASS if report.ok else EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
