"""Configuration and scenario files.

Both use one grammar: ``[kind name ...]`` section headers followed by
``key = value`` lines.  ``#`` starts a comment.  Keys may repeat where the
section allows it (``sid``, ``address``).  Scenario files instead hold an
``[events]`` and an ``[assert]`` section whose lines are
``<tick> <verb> key=value ...`` and ``<check> key=value ...``.

Every diagnostic carries ``file:line``.
"""

from __future__ import annotations

import random
import shlex
from dataclasses import dataclass, field
from ipaddress import IPv6Address, IPv6Network, ip_address, ip_network
from pathlib import Path
from typing import Callable, Iterable

from .behaviors import BehaviorBinding, BehaviorKind, SegmentList
from .controller import PolicyEntry
from .rules import DownlinkRule, UplinkRule
from .sim import (
    LinkSpec,
    NodeKind,
    NodeSpec,
    RouteSpec,
    SessionSpec,
    StaticRuleSpec,
    Topology,
    UeSpec,
)


class ConfigError(Exception):
    """One or more located problems in an input file."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("\n".join(problems))


@dataclass
class Entry:
    key: str
    value: str
    line: int


@dataclass
class Section:
    kind: str
    args: list[str]
    line: int
    entries: list[Entry] = field(default_factory=list)
    body: list[tuple[int, str]] = field(default_factory=list)  # raw lines, for scenario sections

    def values(self, key: str) -> list[Entry]:
        return [e for e in self.entries if e.key == key]


SECTION_KINDS = {
    "controller",
    "smf",
    "node",
    "link",
    "ue",
    "host",
    "gnb",
    "policy",
    "session",
    "route",
    "rule",
    "service",
}
RAW_SECTIONS = {"events", "assert"}
REPEATABLE = {"sid", "address"}


def parse_sections(text: str, origin: str, allowed: set[str]) -> list[Section]:
    sections: list[Section] = []
    problems: list[str] = []
    current: Section | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{origin}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                problems.append(f"{where}: unterminated section header")
                current = None
                continue
            words = line[1:-1].split()
            if not words or words[0] not in allowed:
                problems.append(f"{where}: unknown section {line!r}")
                current = None
                continue
            current = Section(words[0], words[1:], lineno)
            sections.append(current)
            continue
        if current is None:
            problems.append(f"{where}: line outside any section")
            continue
        if current.kind in RAW_SECTIONS:
            current.body.append((lineno, line))
            continue
        key, sep, value = line.partition("=")
        if not sep:
            problems.append(f"{where}: expected key = value")
            continue
        key = key.strip()
        if key not in REPEATABLE and current.values(key):
            problems.append(f"{where}: duplicate key {key!r}")
            continue
        current.entries.append(Entry(key, value.strip(), lineno))
    if problems:
        raise ConfigError(problems)
    return sections


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

BEHAVIOR_NAMES = {k.value.lower(): k for k in BehaviorKind}


class _Reader:
    """Collects located problems instead of stopping at the first one."""

    def __init__(self, origin: str):
        self.origin = origin
        self.problems: list[str] = []

    def err(self, line: int, msg: str) -> None:
        self.problems.append(f"{self.origin}:{line}: {msg}")

    def get(self, sec: Section, key: str, conv: Callable = str, default=..., required: bool = False):
        found = sec.values(key)
        if not found:
            if required or default is ...:
                if required:
                    self.err(sec.line, f"[{sec.kind}] missing {key!r}")
                return None
            return default
        try:
            return conv(found[0].value)
        except (ValueError, KeyError) as exc:
            self.err(found[0].line, f"bad {key} {found[0].value!r}: {exc}")
            return None

    def known(self, sec: Section, keys: Iterable[str]) -> None:
        keys = set(keys)
        for e in sec.entries:
            if e.key not in keys:
                self.err(e.line, f"[{sec.kind}] unknown key {e.key!r}")

    def name(self, sec: Section, count: int = 1) -> list[str] | None:
        if len(sec.args) != count:
            what = "a name" if count == 1 else f"{count} names"
            self.err(sec.line, f"[{sec.kind}] needs {what}")
            return None
        return sec.args


def _v6(text: str) -> IPv6Address:
    return IPv6Address(text.strip())


def _net(text: str) -> IPv6Network:
    return IPv6Network(text.strip(), strict=True)


def _path(text: str) -> SegmentList:
    return SegmentList([_v6(t) for t in text.split(",") if t.strip()])


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("yes", "true", "1", "on"):
        return True
    if low in ("no", "false", "0", "off"):
        return False
    raise ValueError("expected yes/no")


def _int(text: str) -> int:
    return int(text.strip(), 0)


def _sid(text: str) -> tuple[IPv6Network, BehaviorKind, int]:
    words = text.split()
    if len(words) not in (2, 3):
        raise ValueError("expected '<prefix> <behavior> [table]'")
    kind = BEHAVIOR_NAMES.get(words[1].lower())
    if kind is None:
        raise ValueError(f"unknown behavior {words[1]!r}")
    table = int(words[2]) if len(words) == 3 else 0
    return ip_network(words[0], strict=True), kind, table


@dataclass
class ConfigDocument:
    topology: Topology
    origin: str
    lines: dict[str, int] = field(default_factory=dict)  # "kind name" -> line


def load_config(path: str | Path) -> ConfigDocument:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    return parse_config(text, str(path))


def parse_config(text: str, origin: str = "<config>") -> ConfigDocument:
    sections = parse_sections(text, origin, SECTION_KINDS)
    r = _Reader(origin)
    topo = Topology()
    lines: dict[str, int] = {}
    names: dict[str, int] = {}

    def claim(name: str, line: int) -> None:
        if name in names:
            r.err(line, f"duplicate node id {name!r} (first defined on line {names[name]})")
        else:
            names[name] = line
            lines[name] = line

    controllers, smfs = [], []
    for sec in sections:
        kind = sec.kind
        if kind in ("controller", "smf"):
            got = r.name(sec)
            if not got:
                continue
            r.known(sec, {"address", "node_id", "n3_address", "recovery"})
            claim(got[0], sec.line)
            addrs = [_safe(r, e, _v6) for e in sec.values("address")]
            if not addrs:
                r.err(sec.line, f"[{kind}] missing 'address'")
            spec = NodeSpec(
                got[0],
                NodeKind.CONTROLLER if kind == "controller" else NodeKind.SMF,
                [a for a in addrs if a is not None],
                node_id=r.get(sec, "node_id", str, None),
                n3_address=r.get(sec, "n3_address", _v6, None),
                recovery_ts=r.get(sec, "recovery", _int, None),
                line=sec.line,
            )
            (controllers if kind == "controller" else smfs).append(sec)
            topo.nodes.append(spec)
        elif kind == "node":
            got = r.name(sec)
            if not got:
                continue
            r.known(sec, {"kind", "address", "source", "sid"})
            claim(got[0], sec.line)
            nk = r.get(sec, "kind", str, required=True)
            if nk not in ("gateway", "transit"):
                if nk is not None:
                    r.err(sec.values("kind")[0].line, f"node kind must be gateway or transit, not {nk!r}")
                continue
            addrs = [_safe(r, e, _v6) for e in sec.values("address")]
            bindings = []
            source = r.get(sec, "source", _v6, None)
            for e in sec.values("sid"):
                parsed = _safe(r, e, _sid)
                if parsed is not None:
                    prefix, bk, table = parsed
                    if nk == "transit" and bk is not BehaviorKind.END:
                        r.err(e.line, f"transit nodes only bind End, not {bk.value}")
                        continue
                    bindings.append(BehaviorBinding(prefix, bk, source, table))
            topo.nodes.append(
                NodeSpec(
                    got[0],
                    NodeKind(nk),
                    [a for a in addrs if a is not None],
                    bindings=bindings,
                    source=source,
                    line=sec.line,
                )
            )
        elif kind in ("gnb", "host"):
            got = r.name(sec)
            if not got:
                continue
            r.known(sec, {"address", "gateway", "echo"})
            claim(got[0], sec.line)
            addrs = [_safe(r, e, _v6) for e in sec.values("address")]
            if not addrs:
                r.err(sec.line, f"[{kind}] missing 'address'")
            topo.nodes.append(
                NodeSpec(
                    got[0],
                    NodeKind(kind),
                    [a for a in addrs if a is not None],
                    gateway=r.get(sec, "gateway", str, required=True),
                    echo=r.get(sec, "echo", _bool, True),
                    line=sec.line,
                )
            )
        elif kind == "link":
            got = r.name(sec, 2)
            if not got:
                continue
            r.known(sec, {"delay"})
            delay = r.get(sec, "delay", _int, 1)
            if delay is not None and delay < 0:
                r.err(sec.line, "link delay must be >= 0")
            topo.links.append(LinkSpec(got[0], got[1], delay or 0, line=sec.line))
        elif kind == "ue":
            got = r.name(sec)
            if not got:
                continue
            r.known(sec, {"gnb"})
            claim(got[0], sec.line)
            topo.ues.append(UeSpec(got[0], r.get(sec, "gnb", str, required=True), line=sec.line))
        elif kind == "policy":
            got = r.name(sec)
            if not got:
                continue
            r.known(sec, {"gateway", "path", "downlink"})
            if got[0] in topo.policy:
                r.err(sec.line, f"duplicate policy for {got[0]!r}")
            gw = r.get(sec, "gateway", str, required=True)
            path = r.get(sec, "path", _path, required=True)
            if path is not None and not path:
                r.err(sec.values("path")[0].line, "policy path is empty")
                path = None
            down = r.get(sec, "downlink", lambda t: tuple(_path(t)) if t.strip() else (), None)
            lines[f"policy {got[0]}"] = sec.line
            if gw is not None and path is not None:
                topo.policy[got[0]] = PolicyEntry(gw, path, down)
        elif kind == "session":
            got = r.name(sec)
            if not got:
                continue
            r.known(sec, {"ue", "network_instance", "ue_address", "ul_teid", "qfi", "dl_teid", "auto"})
            lines[f"session {got[0]}"] = sec.line
            vals = dict(
                ue=r.get(sec, "ue", str, required=True),
                network_instance=r.get(sec, "network_instance", str, required=True),
                ue_address=r.get(sec, "ue_address", _v6, required=True),
                ul_teid=r.get(sec, "ul_teid", _int, required=True),
            )
            qfi = r.get(sec, "qfi", _int, 9)
            if qfi is not None and not 0 <= qfi < 64:
                r.err(sec.values("qfi")[0].line, "qfi must be in 0..63")
            if None in vals.values():
                continue
            topo.sessions.append(
                SessionSpec(
                    got[0],
                    qfi=qfi if qfi is not None else 9,
                    dl_teid=r.get(sec, "dl_teid", _int, None),
                    auto=r.get(sec, "auto", _bool, True),
                    line=sec.line,
                    **vals,
                )
            )
        elif kind == "route":
            got = r.name(sec)
            if not got:
                continue
            r.known(sec, {"prefix", "via"})
            prefix = r.get(sec, "prefix", _net, required=True)
            via = r.get(sec, "via", str, required=True)
            if prefix is not None and via is not None:
                topo.routes.append(RouteSpec(got[0], prefix, via, line=sec.line))
        elif kind == "rule":
            got = r.name(sec)
            if not got:
                continue
            r.known(sec, {"direction", "teid", "qfi", "src", "priority", "prefix", "path"})
            rule = _static_rule(r, sec)
            if rule is not None:
                topo.static_rules.append(StaticRuleSpec(got[0], rule, line=sec.line))
        elif kind == "service":
            r.known(sec, {"address"})
            topo.service_address = r.get(sec, "address", _v6, required=True)
    doc = ConfigDocument(topo, origin, lines)
    _check_references(r, doc, controllers, smfs)
    if r.problems:
        raise ConfigError(r.problems)
    return doc


def _safe(r: _Reader, e: Entry, conv: Callable):
    try:
        return conv(e.value)
    except ValueError as exc:
        r.err(e.line, f"bad {e.key} {e.value!r}: {exc}")
        return None


def _static_rule(r: _Reader, sec: Section):
    direction = r.get(sec, "direction", str, required=True)
    path = r.get(sec, "path", _path, required=True)
    if direction == "uplink":
        teid = r.get(sec, "teid", _int, required=True)
        src = r.get(sec, "src", lambda t: ip_network(t.strip()), None)
        if teid is None or path is None:
            return None
        return UplinkRule(
            0, teid, path, qfi=r.get(sec, "qfi", _int, None), inner_src_prefix=src, priority=r.get(sec, "priority", _int, 0)
        )
    if direction == "downlink":
        prefix = r.get(sec, "prefix", lambda t: ip_network(t.strip()), required=True)
        if prefix is None or path is None:
            return None
        return DownlinkRule(0, prefix, path)
    if direction is not None:
        r.err(sec.values("direction")[0].line, "direction must be uplink or downlink")
    return None


def _check_references(r: _Reader, doc: ConfigDocument, controllers: list[Section], smfs: list[Section]) -> None:
    topo = doc.topology
    if len(controllers) != 1:
        where = controllers[1].line if len(controllers) > 1 else 1
        r.err(where, f"exactly one [controller] is required, found {len(controllers)}")
    if len(smfs) != 1:
        where = smfs[1].line if len(smfs) > 1 else 1
        r.err(where, f"exactly one [smf] is required, found {len(smfs)}")
    kinds = {n.name: n.kind for n in topo.nodes}
    ues = {u.name for u in topo.ues}
    for n in topo.nodes:
        if n.kind in (NodeKind.GNB, NodeKind.HOST) and n.gateway is not None:
            if kinds.get(n.gateway) is not NodeKind.GATEWAY:
                r.err(n.line, f"{n.name}: unknown gateway {n.gateway!r}")
        if n.kind is NodeKind.CONTROLLER and n.n3_address is None and topo.sessions:
            r.err(n.line, "controller needs n3_address when sessions are configured")
    for link in topo.links:
        for end in (link.a, link.b):
            if end not in kinds:
                r.err(link.line, f"link references unknown node {end!r}")
    for u in topo.ues:
        if u.gnb is not None and kinds.get(u.gnb) is not NodeKind.GNB:
            r.err(u.line, f"ue {u.name}: unknown gNB {u.gnb!r}")
    for ni, entry in topo.policy.items():
        if kinds.get(entry.gateway) is not NodeKind.GATEWAY:
            r.err(doc.lines[f"policy {ni}"], f"policy {ni}: unknown gateway {entry.gateway!r}")
    seen: dict[str, int] = {}
    for s in topo.sessions:
        if s.name in seen:
            r.err(s.line, f"duplicate session {s.name!r}")
        seen[s.name] = s.line
        if s.ue not in ues:
            r.err(s.line, f"session {s.name}: unknown ue {s.ue!r}")
        if s.network_instance not in topo.policy:
            r.err(s.line, f"session {s.name}: no policy for network instance {s.network_instance!r}")
    for rt in topo.routes:
        for n in (rt.node, rt.via):
            if n not in kinds:
                r.err(rt.line, f"route references unknown node {n!r}")
    for st in topo.static_rules:
        if kinds.get(st.gateway) is not NodeKind.GATEWAY:
            r.err(st.line, f"rule: unknown gateway {st.gateway!r}")


def validate(text: str, origin: str = "<config>") -> list[str]:
    """Return the list of located problems, empty when the config is usable."""
    from .sim import SimError, Simulator

    try:
        doc = parse_config(text, origin)
    except ConfigError as exc:
        return exc.problems
    try:
        Simulator(doc.topology)
    except SimError as exc:
        return [f"{origin}:{_blame(doc, str(exc))}: {exc}"]
    return []


def _blame(doc: ConfigDocument, message: str) -> int:
    """Best-effort line for a semantic error raised while building."""
    for name, line in doc.lines.items():
        if " " not in name and repr(name) in message or message.startswith(name + ":"):
            return line
    return 1


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


@dataclass
class ScenarioEvent:
    tick: int
    verb: str
    args: dict[str, str]
    line: int


@dataclass
class Assertion:
    check: str
    args: dict[str, str]
    line: int
    text: str


@dataclass
class Scenario:
    origin: str
    events: list[ScenarioEvent] = field(default_factory=list)
    assertions: list[Assertion] = field(default_factory=list)


EVENT_KEYS = {
    "inject": {"ue", "session", "host", "dst", "payload", "hex", "size", "seed", "count", "interval", "sport", "dport"},
    "establish": {"session"},
    "modify": {"session", "uplink", "downlink", "network_instance", "dl_teid"},
    "delete": {"session"},
    "handover": {"ue", "to"},
    "policy-update": {"ni", "gateway", "path", "downlink", "remove"},
}
ASSERT_KEYS = {
    "delivered": {"at", "via", "after", "before", "count", "min", "max", "payload"},
    "dropped": {"reason", "at", "after", "before", "count", "min", "max"},
    "census": {"kind", "node", "field", "count", "min", "max"},
    "visits": {"node", "after", "before", "count", "min", "max"},
    "peers": {"count", "min", "max"},
    "associations": {"count", "min", "max"},
}


def _kv(words: list[str], where: str, problems: list[str]) -> dict[str, str]:
    out: dict[str, str] = {}
    for w in words:
        k, sep, v = w.partition("=")
        if not sep or not k:
            problems.append(f"{where}: expected key=value, got {w!r}")
            continue
        if k in out:
            problems.append(f"{where}: duplicate key {k!r}")
        out[k] = v
    return out


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{path}: {exc.strerror}"]) from None
    return parse_scenario(text, str(path))


def parse_scenario(text: str, origin: str = "<scenario>") -> Scenario:
    sections = parse_sections(text, origin, RAW_SECTIONS)
    sc = Scenario(origin)
    problems: list[str] = []
    for sec in sections:
        for lineno, line in sec.body:
            where = f"{origin}:{lineno}"
            try:
                words = shlex.split(line)
            except ValueError as exc:
                problems.append(f"{where}: {exc}")
                continue
            if sec.kind == "events":
                if len(words) < 2:
                    problems.append(f"{where}: expected '<tick> <verb> key=value ...'")
                    continue
                try:
                    tick = int(words[0])
                    if tick < 0:
                        raise ValueError
                except ValueError:
                    problems.append(f"{where}: bad tick {words[0]!r}")
                    continue
                verb = words[1]
                if verb not in EVENT_KEYS:
                    problems.append(f"{where}: unknown event {verb!r}")
                    continue
                args = _kv(words[2:], where, problems)
                for k in set(args) - EVENT_KEYS[verb]:
                    problems.append(f"{where}: {verb}: unknown key {k!r}")
                sc.events.append(ScenarioEvent(tick, verb, args, lineno))
            else:
                check = words[0]
                if check not in ASSERT_KEYS:
                    problems.append(f"{where}: unknown assertion {check!r}")
                    continue
                args = _kv(words[1:], where, problems)
                for k in set(args) - ASSERT_KEYS[check]:
                    problems.append(f"{where}: {check}: unknown key {k!r}")
                sc.assertions.append(Assertion(check, args, lineno, line))
    if problems:
        raise ConfigError(problems)
    return sc


def payloads(args: dict[str, str]) -> list[bytes]:
    """The payload bytes an ``inject`` line asks for, one per packet."""
    count = int(args.get("count", "1"))
    if count < 1:
        raise ValueError("count must be >= 1")
    if "hex" in args:
        return [bytes.fromhex(args["hex"])] * count
    if "size" in args:
        rng = random.Random(int(args.get("seed", "0")))
        size = int(args["size"])
        if size < 0:
            raise ValueError("size must be >= 0")
        return [rng.randbytes(size) for _ in range(count)]
    return [args.get("payload", "ping").encode()] * count


def address(text: str) -> IPv6Address:
    addr = ip_address(text)
    if not isinstance(addr, IPv6Address):
        raise ValueError(f"{text} is not an IPv6 address")
    return addr
