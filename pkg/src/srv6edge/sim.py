"""Deterministic discrete-event simulation of the SR domain.

Nodes exchange real packet bytes over lossless, in-order, fixed-delay links.
Events are processed in (tick, insertion order); every packet transformation
leaves at least one :class:`TraceEvent`.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import itertools
from dataclasses import dataclass, field
from ipaddress import IPv6Address, IPv6Network, ip_network
from typing import Any

import networkx as nx

from . import wire
from .behaviors import (
    DEFAULT_HOP_LIMIT,
    BehaviorBinding,
    BehaviorKind,
    Drop,
    LocalDeliver,
    h_encaps,
    run_behavior,
)
from .controller import Controller, GatewayHandle, PolicyEntry
from .pfcp import ApplyAction, NodeId, PfcpError
from .rules import NoMatch, Rule, RuleStore, RuleTable
from .smf import SmfEmulator, SmfSession
from .wire import GTPU_PORT, PFCP_PORT, CodecError, InnerPdu, Ipv6Header

class SimError(Exception):
    pass


class DanglingLink(SimError):
    pass


class DuplicateAddress(SimError):
    pass


class DuplicateNode(SimError):
    pass


class LimitExceeded(SimError):
    pass


class NodeKind(str, enum.Enum):
    GATEWAY = "gateway"
    TRANSIT = "transit"
    GNB = "gnb"
    HOST = "host"
    SMF = "smf"
    CONTROLLER = "controller"
    UE = "ue"


SR_KINDS = frozenset({NodeKind.GATEWAY, NodeKind.TRANSIT})


# ---------------------------------------------------------------------------
# Topology description
# ---------------------------------------------------------------------------


@dataclass
class NodeSpec:
    name: str
    kind: NodeKind
    addresses: list[IPv6Address] = field(default_factory=list)
    locator: IPv6Network | None = None
    bindings: list[BehaviorBinding] = field(default_factory=list)
    gateway: str | None = None  # attachment point of a gNB or host
    source: IPv6Address | None = None  # SR source address of a gateway
    echo: bool = True  # hosts answer UDP datagrams
    node_id: str | None = None  # PFCP Node ID (controller, smf)
    n3_address: IPv6Address | None = None  # controller: address the gNBs tunnel to
    recovery_ts: int | None = None
    line: int | None = None


@dataclass
class LinkSpec:
    a: str
    b: str
    delay: int = 1
    line: int | None = None


@dataclass
class UeSpec:
    name: str
    gnb: str
    line: int | None = None


@dataclass
class SessionSpec:
    name: str
    ue: str
    network_instance: str
    ue_address: IPv6Address
    ul_teid: int
    qfi: int = 9
    dl_teid: int | None = None
    auto: bool = True
    line: int | None = None


@dataclass
class RouteSpec:
    node: str
    prefix: IPv6Network
    via: str
    line: int | None = None


@dataclass
class StaticRuleSpec:
    gateway: str
    rule: Rule
    line: int | None = None


@dataclass
class Topology:
    nodes: list[NodeSpec] = field(default_factory=list)
    links: list[LinkSpec] = field(default_factory=list)
    ues: list[UeSpec] = field(default_factory=list)
    sessions: list[SessionSpec] = field(default_factory=list)
    policy: dict[str, PolicyEntry] = field(default_factory=dict)
    routes: list[RouteSpec] = field(default_factory=list)
    static_rules: list[StaticRuleSpec] = field(default_factory=list)
    service_address: IPv6Address | None = None


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------


def payload_hash(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


@dataclass(frozen=True)
class PacketSummary:
    outer_src: str | None = None
    outer_dst: str | None = None
    sl: int | None = None
    teid: int | None = None
    qfi: int | None = None
    inner_src: str | None = None
    inner_dst: str | None = None
    payload_hash: str | None = None
    message: str | None = None

    @classmethod
    def of(cls, packet: bytes) -> PacketSummary:
        try:
            d = wire.dissect(packet)
        except CodecError as exc:
            return cls(message=f"undecodable: {exc}", payload_hash=payload_hash(packet))
        ip = d.ipv6
        message = None
        if d.gtpu is not None and d.gtpu.message_type != wire.GTPU_GPDU:
            message = f"gtpu-{d.gtpu.message_type}"
        elif d.udp is not None and PFCP_PORT in (d.udp.dst_port, d.udp.src_port):
            message = f"pfcp-{d.udp_payload[1]}" if d.udp_payload and len(d.udp_payload) > 1 else "pfcp"
        if d.inner is not None:
            inner = d.inner
            isrc, idst, h = str(inner.src), str(inner.dst), payload_hash(inner.data)
        elif d.srh is None and d.gtpu is None and message is None:
            # a bare user packet: the packet is its own payload
            isrc, idst, h = str(ip.src), str(ip.dst), payload_hash(packet)
        else:
            isrc = idst = h = None
        return cls(
            outer_src=str(ip.src),
            outer_dst=str(ip.dst),
            sl=d.srh.segments_left if d.srh else None,
            teid=d.gtpu.teid if d.gtpu else None,
            qfi=d.gtpu.qfi if d.gtpu else None,
            inner_src=isrc,
            inner_dst=idst,
            payload_hash=h,
            message=message,
        )


@dataclass(frozen=True)
class TraceEvent:
    time: int
    node: str
    action: str  # originate, recv, xmit, drop, deliver, rule-update, pfcp, handover, policy-update
    peer: str | None = None
    summary: PacketSummary | None = None
    reason: str | None = None
    packet: bytes | None = None

    FIELDS = (
        "time",
        "node",
        "action",
        "peer",
        "outer_src",
        "outer_dst",
        "sl",
        "teid",
        "qfi",
        "inner_src",
        "inner_dst",
        "payload_hash",
        "reason",
    )

    def columns(self, hex_dump: bool = False) -> list[str]:
        s = self.summary or PacketSummary()
        vals: list[Any] = [
            self.time,
            self.node,
            self.action,
            self.peer,
            s.outer_src,
            s.outer_dst,
            s.sl,
            s.teid,
            s.qfi,
            s.inner_src,
            s.inner_dst,
            s.payload_hash,
            self.reason or s.message,
        ]
        if hex_dump:
            vals.append(self.packet.hex() if self.packet is not None else None)
        return ["-" if v is None else str(v) for v in vals]

    def to_line(self, hex_dump: bool = False) -> str:
        return "\t".join(self.columns(hex_dump))


# ---------------------------------------------------------------------------
# Runtime nodes
# ---------------------------------------------------------------------------


class Fib:
    """Longest-prefix-match table from destination prefix to neighbour."""

    def __init__(self) -> None:
        self._by_len: dict[int, dict[IPv6Network, str]] = {}

    def add(self, prefix: IPv6Network, via: str) -> None:
        self._by_len.setdefault(prefix.prefixlen, {})[prefix] = via

    def lookup(self, dst: IPv6Address) -> str | None:
        for plen in sorted(self._by_len, reverse=True):
            hit = self._by_len[plen].get(ip_network((int(dst), plen), strict=False))
            if hit is not None:
                return hit
        return None

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_len.values())


@dataclass
class Node:
    spec: NodeSpec
    fib: Fib = field(default_factory=Fib)
    store: RuleStore | None = None
    hosts: dict[IPv6Address, str] = field(default_factory=dict)
    gnbs: dict[IPv6Address, str] = field(default_factory=dict)
    neighbours: dict[str, int] = field(default_factory=dict)
    # gNB state
    dl_tunnels: dict[int, tuple[str, str]] = field(default_factory=dict)  # teid -> (ue, session)
    next_teid: int = 1

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def kind(self) -> NodeKind:
        return self.spec.kind

    def owned_prefixes(self) -> list[IPv6Network]:
        out = [ip_network(a) for a in self.spec.addresses]
        if self.spec.locator is not None:
            out.append(self.spec.locator)
        out += [b.prefix for b in self.spec.bindings]
        return out

    def binding_for(self, dst: IPv6Address) -> BehaviorBinding | None:
        best = None
        for b in self.spec.bindings:
            if dst in b.prefix and (best is None or b.prefix.prefixlen > best.prefix.prefixlen):
                best = b
        return best

    @property
    def address(self) -> IPv6Address:
        return self.spec.addresses[0]


@dataclass
class UeState:
    name: str
    gnb: str


class EventKind(str, enum.Enum):
    PACKET_ARRIVAL = "PacketArrival"
    SESSION_ESTABLISH = "SessionEstablish"
    SESSION_MODIFY = "SessionModify"
    SESSION_DELETE = "SessionDelete"
    POLICY_UPDATE = "PolicyUpdate"
    HANDOVER = "Handover"
    INJECT_PDU = "InjectPdu"
    ASSOCIATE = "Associate"


@dataclass
class Event:
    time: int
    kind: EventKind
    args: dict[str, Any]


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------


class Simulator:
    def __init__(self, topology: Topology, *, keep_packets: bool = True):
        self.topology = topology
        self.keep_packets = keep_packets
        self.now = 0
        self.trace: list[TraceEvent] = []
        self.nodes: dict[str, Node] = {}
        self.ues: dict[str, UeState] = {}
        self.sessions: dict[str, SessionSpec] = {}
        self.graph = nx.Graph()
        self.controller: Controller | None = None
        self.smf: SmfEmulator | None = None
        self.smf_node: str | None = None
        self.controller_node: str | None = None
        self.smf_peer_addresses: set[IPv6Address] = set()
        self.injections = 0
        self._queue: list[tuple[int, int, Event]] = []
        self._seq = itertools.count()
        self._build()

    # -- construction -----------------------------------------------------

    def _build(self) -> None:
        topo = self.topology
        sr_addresses: dict[IPv6Address, str] = {}
        for spec in topo.nodes:
            if spec.name in self.nodes:
                raise DuplicateNode(f"duplicate node id {spec.name!r}")
            if spec.bindings and spec.kind not in SR_KINDS:
                raise SimError(f"{spec.name}: SID bindings are only allowed on SR nodes")
            self._check_bindings(spec)
            if spec.kind is not NodeKind.HOST:
                for addr in spec.addresses:
                    if addr in sr_addresses:
                        raise DuplicateAddress(f"{addr} used by {sr_addresses[addr]} and {spec.name}")
                    sr_addresses[addr] = spec.name
            node = Node(spec)
            if spec.kind is NodeKind.GATEWAY:
                gtp6e = [b.prefix for b in spec.bindings if b.kind is BehaviorKind.GTP6_E]
                node.store = RuleStore(gtp6e)
            self.nodes[spec.name] = node
            self.graph.add_node(spec.name)
        for spec in topo.nodes:
            if spec.kind in (NodeKind.GNB, NodeKind.HOST):
                gw = self.nodes.get(spec.gateway or "")
                if gw is None or gw.kind is not NodeKind.GATEWAY:
                    raise DanglingLink(f"{spec.name}: attachment gateway {spec.gateway!r} is not a gateway")
                if not spec.addresses:
                    raise SimError(f"{spec.name}: needs an address")
                table = gw.hosts if spec.kind is NodeKind.HOST else gw.gnbs
                for addr in spec.addresses:
                    if addr in table:
                        raise DuplicateAddress(f"{addr} attached twice to {gw.name}")
                    table[addr] = spec.name
            if spec.kind is NodeKind.SMF:
                self.smf_node = spec.name
            if spec.kind is NodeKind.CONTROLLER:
                self.controller_node = spec.name
        for link in topo.links:
            for end in (link.a, link.b):
                if end not in self.nodes:
                    raise DanglingLink(f"link {link.a}-{link.b}: unknown node {end!r}")
            if link.a == link.b:
                raise DanglingLink(f"self-loop link on {link.a}")
            if link.delay < 0:
                raise SimError(f"link {link.a}-{link.b}: negative delay")
            self._link(link.a, link.b, link.delay)
        for spec in topo.nodes:
            if spec.kind in (NodeKind.GNB, NodeKind.HOST) and spec.gateway not in self.nodes[spec.name].neighbours:
                self._link(spec.name, spec.gateway, 1)
        if self.smf_node and self.controller_node and self.controller_node not in self.nodes[self.smf_node].neighbours:
            self._link(self.smf_node, self.controller_node, 1)
        for ue in topo.ues:
            if ue.name in self.nodes or ue.name in self.ues:
                raise DuplicateNode(f"duplicate node id {ue.name!r}")
            if ue.gnb not in self.nodes or self.nodes[ue.gnb].kind is not NodeKind.GNB:
                raise SimError(f"UE {ue.name}: unknown gNB {ue.gnb!r}")
            self.ues[ue.name] = UeState(ue.name, ue.gnb)
        self._compute_routes()
        self._build_control_plane()
        for s in topo.sessions:
            self.add_session(s)

    def _check_bindings(self, spec: NodeSpec) -> None:
        for a, b in itertools.combinations(spec.bindings, 2):
            if a.prefix.overlaps(b.prefix):
                raise SimError(f"{spec.name}: SID bindings {a.prefix} and {b.prefix} overlap")

    def _link(self, a: str, b: str, delay: int) -> None:
        self.nodes[a].neighbours[b] = delay
        self.nodes[b].neighbours[a] = delay
        self.graph.add_edge(a, b, delay=delay)

    def _compute_routes(self) -> None:
        owners: dict[IPv6Network, list[str]] = {}
        for node in self.nodes.values():
            if node.kind in SR_KINDS or node.kind is NodeKind.GNB:
                for p in node.owned_prefixes():
                    owners.setdefault(p, []).append(node.name)
        for node in self.nodes.values():
            if node.kind not in SR_KINDS:
                if node.spec.gateway:
                    node.fib.add(IPv6Network("::/0"), node.spec.gateway)
                continue
            dist, paths = nx.single_source_dijkstra(self.graph, node.name, weight="delay")
            for prefix, names in owners.items():
                reachable = [n for n in names if n in dist]
                if not reachable or node.name in names:
                    continue
                target = min(reachable, key=lambda n: (dist[n], n))
                node.fib.add(prefix, paths[target][1])
        for route in self.topology.routes:
            node = self.nodes.get(route.node)
            if node is None or route.via not in self.nodes:
                raise DanglingLink(f"route on {route.node} via {route.via}: unknown node")
            if route.via not in node.neighbours:
                raise DanglingLink(f"route on {route.node}: {route.via} is not a neighbour")
            node.fib.add(route.prefix, route.via)

    def _build_control_plane(self) -> None:
        handles = []
        for node in self.nodes.values():
            if node.kind is not NodeKind.GATEWAY:
                continue
            gtp6e = next((b.prefix for b in node.spec.bindings if b.kind is BehaviorKind.GTP6_E), None)
            access = any(b.kind is BehaviorKind.GTP6_D for b in node.spec.bindings)
            handles.append(GatewayHandle(node.name, node.store, access, gtp6e, tuple(node.gnbs)))
        if self.controller_node:
            spec = self.nodes[self.controller_node].spec
            for entry in self.topology.policy.values():
                if entry.gateway not in self.nodes or self.nodes[entry.gateway].kind is not NodeKind.GATEWAY:
                    raise SimError(f"policy references unknown gateway {entry.gateway!r}")
            self.controller = Controller(
                NodeId(_node_id(spec)),
                spec.addresses[0],
                handles,
                self.topology.policy,
                recovery_ts=spec.recovery_ts or 3_900_000_000,
                on_push=self._trace_push,
            )
            by_gw: dict[str, list[Rule]] = {}
            for st in self.topology.static_rules:
                by_gw.setdefault(st.gateway, []).append(st.rule)
            for gw, rules in by_gw.items():
                self.controller.install_static(gw, rules)
        if self.smf_node:
            spec = self.nodes[self.smf_node].spec
            self.smf = SmfEmulator(NodeId(_node_id(spec)), spec.addresses[0])
            if self.controller_node:
                self.schedule(0, EventKind.ASSOCIATE, {})

    def add_session(self, s: SessionSpec) -> None:
        if s.name in self.sessions:
            raise SimError(f"duplicate session {s.name!r}")
        if s.ue not in self.ues:
            raise SimError(f"session {s.name}: unknown UE {s.ue!r}")
        if self.smf is None or self.controller is None:
            raise SimError("sessions need an SMF and a controller")
        self.sessions[s.name] = s
        n3 = self.nodes[self.controller_node].spec.n3_address
        if n3 is None:
            raise SimError("controller has no n3_address for gNB tunnels")
        self.smf.sessions[s.name] = SmfSession(
            s.name, s.ue, s.network_instance, s.ue_address, s.ul_teid, s.qfi, n3
        )
        if s.auto:
            self.schedule(0, EventKind.SESSION_ESTABLISH, {"session": s.name})

    # -- scheduling -------------------------------------------------------

    def schedule(self, time: int, kind: EventKind, args: dict[str, Any]) -> Event:
        if time < self.now:
            raise SimError(f"cannot schedule at tick {time}, already at {self.now}")
        ev = Event(time, kind, args)
        heapq.heappush(self._queue, (time, next(self._seq), ev))
        return ev

    @property
    def idle(self) -> bool:
        return not self._queue

    def step(self) -> Event | None:
        if not self._queue:
            return None
        time, _, ev = heapq.heappop(self._queue)
        self.now = time
        getattr(self, "_on_" + ev.kind.name.lower())(**ev.args)
        return ev

    def run_until_idle(self, limit: int = 100_000) -> list[TraceEvent]:
        while self._queue:
            if self._queue[0][0] > limit:
                raise LimitExceeded(f"events still pending after tick {limit}")
            self.step()
        return self.trace

    def run_until(self, tick: int) -> None:
        while self._queue and self._queue[0][0] <= tick:
            self.step()
        self.now = max(self.now, tick)

    # -- public operations ------------------------------------------------

    def inject_pdu(
        self,
        ue: str,
        session: str,
        payload: bytes,
        *,
        at: int | None = None,
        dst: IPv6Address | None = None,
        sport: int = 40000,
        dport: int = 7,
    ) -> Event:
        s = self.sessions.get(session)
        if ue not in self.ues:
            raise SimError(f"unknown UE {ue!r}")
        if s is None or s.ue != ue:
            raise SimError(f"UE {ue} has no session {session!r}")
        dst = dst or self.topology.service_address
        if dst is None:
            raise SimError("no destination given and no service address configured")
        args = dict(ue=ue, session=session, payload=bytes(payload), dst=dst, sport=sport, dport=dport)
        return self.schedule(self.now if at is None else at, EventKind.INJECT_PDU, args)

    def inject_downlink(
        self, host: str, dst: IPv6Address, payload: bytes, *, at: int | None = None, sport: int = 7, dport: int = 40000
    ) -> Event:
        node = self.nodes.get(host)
        if node is None or node.kind is not NodeKind.HOST:
            raise SimError(f"unknown host {host!r}")
        args = dict(ue=None, session=None, payload=bytes(payload), dst=dst, sport=sport, dport=dport, host=host)
        return self.schedule(self.now if at is None else at, EventKind.INJECT_PDU, args)

    def establish(self, session: str, at: int | None = None) -> Event:
        self._session(session)
        return self.schedule(self.now if at is None else at, EventKind.SESSION_ESTABLISH, {"session": session})

    def delete(self, session: str, at: int | None = None) -> Event:
        self._session(session)
        return self.schedule(self.now if at is None else at, EventKind.SESSION_DELETE, {"session": session})

    def modify(self, session: str, at: int | None = None, **changes: Any) -> Event:
        self._session(session)
        allowed = {"uplink", "downlink", "network_instance", "dl_teid"}
        if set(changes) - allowed:
            raise SimError(f"unsupported modification keys {sorted(set(changes) - allowed)}")
        return self.schedule(
            self.now if at is None else at, EventKind.SESSION_MODIFY, {"session": session, "changes": changes}
        )

    def trigger_handover(self, ue: str, to_gnb: str, at: int | None = None) -> Event:
        if ue not in self.ues:
            raise SimError(f"unknown UE {ue!r}")
        node = self.nodes.get(to_gnb)
        if node is None or node.kind is not NodeKind.GNB:
            raise SimError(f"unknown gNB {to_gnb!r}")
        return self.schedule(self.now if at is None else at, EventKind.HANDOVER, {"ue": ue, "to_gnb": to_gnb})

    def update_policy(self, network_instance: str, entry: PolicyEntry | None, at: int | None = None) -> Event:
        if self.controller is None:
            raise SimError("no controller")
        if entry is not None and (entry.gateway not in self.nodes or self.nodes[entry.gateway].kind is not NodeKind.GATEWAY):
            raise SimError(f"unknown gateway {entry.gateway!r}")
        args = {"network_instance": network_instance, "entry": entry}
        return self.schedule(self.now if at is None else at, EventKind.POLICY_UPDATE, args)

    def snapshot_state(self) -> dict[str, dict[str, Any]]:
        """Per-node census of rule entries and session-derived state."""
        out: dict[str, dict[str, Any]] = {}
        for node in self.nodes.values():
            table = node.store.snapshot() if node.store else None
            sessions = 0
            if node.kind is NodeKind.CONTROLLER and self.controller is not None:
                sessions = len(self.controller.sessions)
            elif node.kind is NodeKind.SMF and self.smf is not None:
                sessions = sum(1 for s in self.smf.sessions.values() if s.state == "active")
            elif node.kind is NodeKind.GNB:
                sessions = len(node.dl_tunnels)
            uplink = len(table.uplink) if table else 0
            downlink = len(table.downlink) if table else 0
            out[node.name] = {
                "kind": node.kind.value,
                "uplink_rules": uplink,
                "downlink_rules": downlink,
                "rules": uplink + downlink,
                "sessions": sessions,
                "entries": uplink + downlink + sessions,
                "bindings": len(node.spec.bindings),
                "version": table.version if table else 0,
            }
        return out

    def census_by_kind(self) -> dict[str, dict[str, int]]:
        totals: dict[str, dict[str, int]] = {k.value: {"rules": 0, "sessions": 0, "entries": 0} for k in NodeKind if k is not NodeKind.UE}
        for row in self.snapshot_state().values():
            t = totals[row["kind"]]
            for key in ("rules", "sessions", "entries"):
                t[key] += row[key]
        return totals

    def gateway_table(self, name: str) -> RuleTable:
        node = self.nodes[name]
        if node.store is None:
            raise SimError(f"{name} is not a gateway")
        return node.store.snapshot()

    # -- tracing ----------------------------------------------------------

    def _trace(self, node: str, action: str, packet: bytes | None = None, *, peer=None, reason=None, summary=None):
        if summary is None and packet is not None:
            summary = PacketSummary.of(packet)
        ev = TraceEvent(self.now, node, action, peer, summary, reason, packet if self.keep_packets else None)
        self.trace.append(ev)
        return ev

    def _trace_pdu(self, node: str, action: str, pdu: bytes, *, peer=None, reason=None):
        """Trace a bare user PDU (no outer header)."""
        try:
            inner = InnerPdu(pdu)
            summary = PacketSummary(inner_src=str(inner.src), inner_dst=str(inner.dst), payload_hash=payload_hash(pdu))
        except CodecError:
            summary = PacketSummary(payload_hash=payload_hash(pdu))
        return self._trace(node, action, pdu, peer=peer, reason=reason, summary=summary)

    def _trace_push(self, gateway: str, table: RuleTable, added: list[Rule], removed: list[int]) -> None:
        self._trace(gateway, "rule-update", reason=f"v{table.version} +{len(added)} -{len(removed)}")

    # -- packet plumbing --------------------------------------------------

    def _send(self, node: Node, packet: bytes, *, decrement: bool) -> None:
        if decrement:
            if packet[7] <= 1:
                self._trace(node.name, "drop", packet, reason="HopLimitExceeded")
                return
            packet = packet[:7] + bytes((packet[7] - 1,)) + packet[8:]
        dst = IPv6Address(packet[24:40])
        if node.kind in SR_KINDS and any(dst in p for p in node.owned_prefixes()):
            # next segment is local: process again without leaving the node
            self._trace(node.name, "xmit", packet, peer=node.name)
            self.schedule(self.now, EventKind.PACKET_ARRIVAL, {"node": node.name, "packet": packet, "prev": node.name})
            return
        via = node.fib.lookup(dst)
        if via is None:
            self._trace(node.name, "drop", packet, reason="NoRoute")
            return
        self._transmit(node, via, packet)

    def _transmit(self, node: Node, via: str, packet: bytes, *, pdu: bool = False) -> None:
        if pdu:
            self._trace_pdu(node.name, "xmit", packet, peer=via)
        else:
            self._trace(node.name, "xmit", packet, peer=via)
        delay = node.neighbours[via]
        self.schedule(self.now + delay, EventKind.PACKET_ARRIVAL, {"node": via, "packet": packet, "prev": node.name})

    # -- event handlers ---------------------------------------------------

    def _on_associate(self) -> None:
        self._pfcp_to_controller(self.smf.association_setup())

    def _on_session_establish(self, session: str) -> None:
        s = self._session(session)
        ue = self.ues[s.ue]
        gnb = self.nodes[ue.gnb]
        sm = self.smf.sessions[session]
        sm.dl_teid = s.dl_teid if s.dl_teid is not None else self._allocate_teid(gnb)
        sm.gnb_address = gnb.address
        gnb.dl_tunnels[sm.dl_teid] = (s.ue, session)
        self._pfcp_to_controller(self.smf.establishment(sm))

    def _on_session_modify(self, session: str, changes: dict[str, Any]) -> None:
        sm = self.smf.sessions[self._session(session).name]
        kwargs: dict[str, Any] = {}
        if "uplink" in changes:
            kwargs["uplink_action"] = _action(changes["uplink"])
        if "downlink" in changes:
            kwargs["downlink_action"] = _action(changes["downlink"])
        if "network_instance" in changes:
            kwargs["network_instance"] = changes["network_instance"]
        if "dl_teid" in changes:
            gnb = self.nodes[self.ues[sm.ue].gnb]
            gnb.dl_tunnels.pop(sm.dl_teid, None)
            kwargs["new_dl_teid"] = int(changes["dl_teid"])
            gnb.dl_tunnels[kwargs["new_dl_teid"]] = (sm.ue, session)
        self._pfcp_to_controller(self.smf.modification(sm, **kwargs))

    def _on_session_delete(self, session: str) -> None:
        sm = self.smf.sessions[self._session(session).name]
        for node in self.nodes.values():
            if node.kind is NodeKind.GNB and node.dl_tunnels.get(sm.dl_teid, (None, None))[1] == session:
                del node.dl_tunnels[sm.dl_teid]
        self._pfcp_to_controller(self.smf.deletion(sm))

    def _on_handover(self, ue: str, to_gnb: str) -> None:
        state = self.ues[ue]
        src = self.nodes[state.gnb]
        dst = self.nodes[to_gnb]
        self._trace(ue, "handover", reason=f"{src.name}->{dst.name}")
        state.gnb = to_gnb
        for name, sm in self.smf.sessions.items():
            if sm.ue != ue or sm.state != "active":
                continue
            src.dl_tunnels.pop(sm.dl_teid, None)
            teid = self._allocate_teid(dst)
            dst.dl_tunnels[teid] = (ue, name)
            self._pfcp_to_controller(self.smf.modification(sm, new_gnb=dst.address, new_dl_teid=teid))

    def _on_policy_update(self, network_instance: str, entry: PolicyEntry | None) -> None:
        where = "-" if entry is None else f"{entry.gateway} via {','.join(map(str, entry.path))}"
        self._trace(self.controller_node, "policy-update", reason=f"{network_instance} -> {where}")
        self.controller.update_policy(network_instance, entry)

    def _on_inject_pdu(self, ue, session, payload, dst, sport, dport, host=None) -> None:
        self.injections += 1
        if host is not None:
            node = self.nodes[host]
            pdu = wire.build_inner_ipv6_udp(node.address, dst, payload, sport, dport)
            self._trace_pdu(host, "originate", pdu)
            self._transmit(node, node.spec.gateway, pdu, pdu=True)
            return
        s = self.sessions[session]
        pdu = wire.build_inner_ipv6_udp(s.ue_address, dst, payload, sport, dport)
        self._trace_pdu(ue, "originate", pdu)
        gnb = self.nodes[self.ues[ue].gnb]
        self._gnb_uplink(gnb, session, pdu)

    def _on_packet_arrival(self, node: str, packet: bytes, prev: str) -> None:
        n = self.nodes[node]
        if n.kind in SR_KINDS:
            self._sr_receive(n, packet, prev)
        elif n.kind is NodeKind.GNB:
            self._gnb_receive(n, packet, prev)
        elif n.kind is NodeKind.HOST:
            self._host_receive(n, packet, prev)
        elif n.kind is NodeKind.CONTROLLER:
            self._controller_receive(n, packet)
        elif n.kind is NodeKind.SMF:
            self._smf_receive(n, packet)

    # -- node logic -------------------------------------------------------

    def _sr_receive(self, node: Node, packet: bytes, prev: str) -> None:
        from_host = prev in self.nodes and self.nodes[prev].kind is NodeKind.HOST and prev != node.name
        if from_host:
            self._trace_pdu(node.name, "recv", packet, peer=prev)
        else:
            self._trace(node.name, "recv", packet, peer=prev)
        try:
            ip = Ipv6Header(IPv6Address(packet[8:24]), IPv6Address(packet[24:40]), packet[6])
            if packet[0] >> 4 != 6:
                raise CodecError("not IPv6")
        except (CodecError, ValueError) as exc:
            self._trace(node.name, "drop", packet, reason=f"Malformed: {exc}")
            return
        binding = node.binding_for(ip.dst)
        if binding is not None:
            table = node.store.snapshot() if node.store else None
            decision = run_behavior(packet, binding, uplink_rules=table, hosts=node.hosts)
            if isinstance(decision, Drop):
                self._trace(node.name, "drop", packet, reason=decision.reason)
            elif isinstance(decision, LocalDeliver):
                self._transmit(node, decision.host, decision.pdu, pdu=True)
            else:
                self._send(node, decision.packet, decrement=not decision.new_outer)
            return
        if from_host and node.store is not None:
            self._downlink_ingress(node, packet)
            return
        if any(ip.dst == a for a in node.spec.addresses):
            self._trace(node.name, "drop", packet, reason="NoBinding")
            return
        self._send(node, packet, decrement=True)

    def _downlink_ingress(self, node: Node, packet: bytes) -> None:
        try:
            inner = InnerPdu(packet)
            path = node.store.snapshot().classify_downlink(inner.dst)
        except NoMatch:
            self._trace_pdu(node.name, "drop", packet, reason="NoMatchingRule")
            return
        except CodecError as exc:
            self._trace_pdu(node.name, "drop", packet, reason=f"Malformed: {exc}")
            return
        src = node.spec.source or node.address
        self._send(node, h_encaps(inner, path, src), decrement=False)

    def _gnb_uplink(self, gnb: Node, session: str, pdu: bytes) -> None:
        sm = self.smf.sessions[session]
        if sm.state != "active" and sm.state != "pending":
            self._trace_pdu(gnb.name, "drop", pdu, reason="NoTunnel")
            return
        gtp = wire.gpdu_header(sm.ul_teid, sm.qfi, wire.PDU_TYPE_UPLINK)
        body = wire.serialize_gtpu(gtp, pdu)
        seg = wire.build_udp(gnb.address, sm.n3_address, GTPU_PORT, GTPU_PORT, body)
        packet = wire.serialize_ipv6(Ipv6Header(gnb.address, sm.n3_address, wire.IPPROTO_UDP, DEFAULT_HOP_LIMIT), seg)
        self._transmit(gnb, gnb.spec.gateway, packet)

    def _gnb_receive(self, gnb: Node, packet: bytes, prev: str) -> None:
        self._trace(gnb.name, "recv", packet, peer=prev)
        try:
            d = wire.dissect(packet)
        except CodecError as exc:
            self._trace(gnb.name, "drop", packet, reason=f"Malformed: {exc}")
            return
        if d.gtpu is None:
            self._trace(gnb.name, "drop", packet, reason="NotGtpu")
            return
        if d.gtpu.message_type == wire.GTPU_ECHO_RESPONSE:
            return
        owner = gnb.dl_tunnels.get(d.gtpu.teid)
        if owner is None:
            self._trace(gnb.name, "drop", packet, reason="UnknownTeid")
            return
        ue, _ = owner
        if self.ues[ue].gnb != gnb.name:
            self._trace(gnb.name, "drop", packet, reason="UeNotAttached")
            return
        if d.inner is None:
            self._trace(gnb.name, "drop", packet, reason="Malformed")
            return
        self._trace_pdu(ue, "deliver", d.inner.data, peer=gnb.name)

    def _host_receive(self, host: Node, pdu: bytes, prev: str) -> None:
        self._trace_pdu(host.name, "deliver", pdu, peer=prev)
        if not host.spec.echo:
            return
        try:
            ip, rest = wire.parse_ipv6(pdu)
            if ip.next_header != wire.IPPROTO_UDP:
                return
            udp, payload = wire.parse_udp(ip.src, ip.dst, rest)
        except CodecError:
            return
        reply = wire.build_inner_ipv6_udp(ip.dst, ip.src, payload, udp.dst_port, udp.src_port)
        self.injections += 1
        self._trace_pdu(host.name, "originate", reply)
        self._transmit(host, host.spec.gateway, reply, pdu=True)

    def _pfcp_to_controller(self, data: bytes) -> None:
        smf = self.nodes[self.smf_node]
        ctl = self.nodes[self.controller_node]
        self._transmit(smf, ctl.name, _udp_packet(smf.address, ctl.address, data))

    def _controller_receive(self, node: Node, packet: bytes) -> None:
        self._trace(node.name, "pfcp", packet, reason="rx")
        try:
            ip, rest = wire.parse_ipv6(packet)
            _, data = wire.parse_udp(ip.src, ip.dst, rest)
            resp = self.controller.handle(data)
        except (CodecError, PfcpError) as exc:
            self._trace(node.name, "drop", packet, reason=f"Malformed: {exc}")
            return
        if resp is not None:
            self._transmit(node, self.smf_node, _udp_packet(node.address, ip.src, resp))

    def _smf_receive(self, node: Node, packet: bytes) -> None:
        self._trace(node.name, "pfcp", packet, reason="rx")
        ip, rest = wire.parse_ipv6(packet)
        _, data = wire.parse_udp(ip.src, ip.dst, rest)
        self.smf_peer_addresses.add(ip.src)
        self.smf.on_response(data)

    # -- helpers ----------------------------------------------------------

    def _session(self, name: str) -> SessionSpec:
        s = self.sessions.get(name)
        if s is None:
            raise SimError(f"unknown session {name!r}")
        return s

    def _allocate_teid(self, gnb: Node) -> int:
        while gnb.next_teid in gnb.dl_tunnels:
            gnb.next_teid += 1
        teid = gnb.next_teid
        gnb.next_teid += 1
        return teid

    # -- trace queries ----------------------------------------------------

    def deliveries(self, node: str | None = None) -> list[TraceEvent]:
        return [e for e in self.trace if e.action == "deliver" and (node is None or e.node == node)]

    def drops(self, reason: str | None = None) -> list[TraceEvent]:
        return [e for e in self.trace if e.action == "drop" and (reason is None or e.reason == reason)]

    def conservation(self) -> tuple[int, int, int]:
        """(originated, delivered, dropped) counts of user packets."""
        originated = sum(1 for e in self.trace if e.action == "originate")
        delivered = sum(1 for e in self.trace if e.action == "deliver")
        dropped = sum(1 for e in self.trace if e.action == "drop")
        return originated, delivered, dropped

    def export_trace(self, path, hex_dump: bool = False) -> int:
        lines = [e.to_line(hex_dump) for e in self.trace]
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in lines))
        return len(lines)


def _udp_packet(src: IPv6Address, dst: IPv6Address, payload: bytes) -> bytes:
    seg = wire.build_udp(src, dst, PFCP_PORT, PFCP_PORT, payload)
    return wire.serialize_ipv6(Ipv6Header(src, dst, wire.IPPROTO_UDP, DEFAULT_HOP_LIMIT), seg)


def _node_id(spec: NodeSpec) -> IPv6Address | str:
    if spec.node_id is None:
        return spec.addresses[0]
    try:
        return IPv6Address(spec.node_id)
    except ValueError:
        return spec.node_id


def _action(value: str | int) -> int:
    if isinstance(value, int):
        return value
    try:
        return ApplyAction[value.upper()]
    except KeyError:
        raise SimError(f"unknown apply action {value!r}") from None
