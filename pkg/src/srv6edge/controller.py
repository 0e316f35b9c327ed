"""The SR-domain controller.

Northbound it answers PFCP as one UPF; southbound it owns the rule stores of
every SR gateway and rewrites them whenever a session or the slice policy
changes.  Messages are handled strictly one at a time.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from ipaddress import IPv6Address, IPv6Network, ip_network
from typing import Callable, Iterable, Mapping, Sequence

from . import pfcp
from .behaviors import SegmentList, encode_gtp6e_sid
from .pfcp import (
    Cause,
    FSeid,
    FTeid,
    Ie,
    IeType,
    Interface,
    MsgType,
    NodeId,
    OuterHeaderCreation,
    PfcpMessage,
    UeIpAddress,
)
from .rules import DownlinkRule, Rule, RuleError, RuleStore, RuleTable, UplinkRule

log = logging.getLogger(__name__)

RESPONSE_CACHE_DEPTH = 16
DEFAULT_RECOVERY_TS = 3_900_000_000


class SessionError(Exception):
    def __init__(self, cause: Cause, message: str):
        super().__init__(message)
        self.cause = cause


class MissingIe(SessionError):
    def __init__(self, message: str):
        super().__init__(Cause.MANDATORY_IE_MISSING, message)


class UnknownNetworkInstance(SessionError):
    def __init__(self, name: str | None):
        super().__init__(Cause.RULE_CREATION_FAILURE, f"no policy for network instance {name!r}")


class CompileError(SessionError):
    def __init__(self, message: str):
        super().__init__(Cause.RULE_CREATION_FAILURE, message)


# ---------------------------------------------------------------------------
# Session model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pdi:
    source_interface: int
    f_teid: FTeid | None = None
    ue_ip: UeIpAddress | None = None
    network_instance: str | None = None
    qfi: int | None = None


@dataclass(frozen=True)
class Pdr:
    pdr_id: int
    precedence: int
    pdi: Pdi
    far_id: int
    outer_header_removal: int | None = None


@dataclass(frozen=True)
class Far:
    far_id: int
    apply_action: int
    destination_interface: int | None = None
    network_instance: str | None = None
    outer_header_creation: OuterHeaderCreation | None = None


@dataclass
class PfcpSession:
    cp_fseid: FSeid
    up_fseid: FSeid
    pdrs: dict[int, Pdr] = field(default_factory=dict)
    fars: dict[int, Far] = field(default_factory=dict)

    def copy(self) -> PfcpSession:
        return PfcpSession(self.cp_fseid, self.up_fseid, dict(self.pdrs), dict(self.fars))

    def validate(self) -> None:
        for pdr in self.pdrs.values():
            if pdr.far_id not in self.fars:
                raise MissingIe(f"PDR {pdr.pdr_id} references missing FAR {pdr.far_id}")
            if pdr.pdi.source_interface == Interface.ACCESS and pdr.pdi.f_teid is None:
                raise MissingIe(f"access PDR {pdr.pdr_id} carries no F-TEID")
            if pdr.pdi.source_interface == Interface.CORE and pdr.pdi.ue_ip is None:
                raise MissingIe(f"core PDR {pdr.pdr_id} carries no UE IP Address")

    def access_pdrs(self) -> list[Pdr]:
        return [p for p in self.pdrs.values() if p.pdi.source_interface == Interface.ACCESS]

    def core_pdrs(self) -> list[Pdr]:
        return [p for p in self.pdrs.values() if p.pdi.source_interface == Interface.CORE]


def _required(parent: Ie | PfcpMessage, ie_type: IeType, where: str) -> Ie:
    ie = parent.find(ie_type)
    if ie is None:
        raise MissingIe(f"{where}: missing {ie_type.name}")
    return ie


def _pdi_from_ie(ie: Ie) -> Pdi:
    src = _required(ie, IeType.SOURCE_INTERFACE, "PDI")
    fteid = ie.find(IeType.F_TEID)
    ueip = ie.find(IeType.UE_IP_ADDRESS)
    ni = ie.find(IeType.NETWORK_INSTANCE)
    qfi = ie.find(IeType.QFI)
    return Pdi(
        source_interface=pfcp.interface_value(src),
        f_teid=FTeid.from_ie(fteid) if fteid else None,
        ue_ip=UeIpAddress.from_ie(ueip) if ueip else None,
        network_instance=pfcp.network_instance_value(ni) if ni else None,
        qfi=pfcp.qfi_value(qfi) if qfi else None,
    )


def pdr_from_ie(ie: Ie) -> Pdr:
    ohr = ie.find(IeType.OUTER_HEADER_REMOVAL)
    return Pdr(
        pdr_id=pfcp.int_value(_required(ie, IeType.PDR_ID, "Create PDR")),
        precedence=pfcp.int_value(_required(ie, IeType.PRECEDENCE, "Create PDR")),
        pdi=_pdi_from_ie(_required(ie, IeType.PDI, "Create PDR")),
        far_id=pfcp.int_value(_required(ie, IeType.FAR_ID, "Create PDR")),
        outer_header_removal=pfcp.int_value(ohr) if ohr else None,
    )


def _forwarding_fields(fp: Ie | None) -> dict:
    if fp is None:
        return {}
    out: dict = {}
    di = fp.find(IeType.DESTINATION_INTERFACE)
    ni = fp.find(IeType.NETWORK_INSTANCE)
    ohc = fp.find(IeType.OUTER_HEADER_CREATION)
    if di:
        out["destination_interface"] = pfcp.interface_value(di)
    if ni:
        out["network_instance"] = pfcp.network_instance_value(ni)
    if ohc:
        out["outer_header_creation"] = OuterHeaderCreation.from_ie(ohc)
    return out


def far_from_ie(ie: Ie) -> Far:
    far_id = pfcp.int_value(_required(ie, IeType.FAR_ID, "Create FAR"))
    action = pfcp.int_value(_required(ie, IeType.APPLY_ACTION, "Create FAR"))
    return Far(far_id, action, **_forwarding_fields(ie.find(IeType.FORWARDING_PARAMETERS)))


def _update_pdr(old: Pdr, ie: Ie) -> Pdr:
    changes: dict = {}
    if (p := ie.find(IeType.PRECEDENCE)) is not None:
        changes["precedence"] = pfcp.int_value(p)
    if (p := ie.find(IeType.PDI)) is not None:
        changes["pdi"] = _pdi_from_ie(p)
    if (p := ie.find(IeType.FAR_ID)) is not None:
        changes["far_id"] = pfcp.int_value(p)
    if (p := ie.find(IeType.OUTER_HEADER_REMOVAL)) is not None:
        changes["outer_header_removal"] = pfcp.int_value(p)
    return replace(old, **changes)


def _update_far(old: Far, ie: Ie) -> Far:
    changes = _forwarding_fields(ie.find(IeType.UPDATE_FORWARDING_PARAMETERS))
    if (a := ie.find(IeType.APPLY_ACTION)) is not None:
        changes["apply_action"] = pfcp.int_value(a)
    return replace(old, **changes)


# ---------------------------------------------------------------------------
# Policy and compilation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PolicyEntry:
    """Where a slice's traffic goes.

    ``path`` is the uplink segment list and must end with the DT SID on
    ``gateway``.  ``downlink_waypoints`` defaults to the uplink waypoints
    reversed (without the final DT SID).
    """

    gateway: str
    path: SegmentList
    downlink_waypoints: tuple[IPv6Address, ...] | None = None

    def reverse_waypoints(self) -> tuple[IPv6Address, ...]:
        if self.downlink_waypoints is not None:
            return tuple(self.downlink_waypoints)
        return tuple(reversed(self.path[:-1]))


InstancePolicy = Mapping[str, PolicyEntry]


@dataclass
class GatewayHandle:
    """What the controller knows about one SR gateway."""

    name: str
    store: RuleStore
    access: bool = False
    gtp6e_prefix: IPv6Network | None = None
    gnbs: tuple[IPv6Address, ...] = ()


def _ue_prefix(ue: UeIpAddress):
    if ue.ipv6 is not None:
        return ip_network((ue.ipv6, ue.prefix_length if ue.prefix_length is not None else 128), strict=False)
    if ue.ipv4 is not None:
        return ip_network((ue.ipv4, 32))
    raise MissingIe("UE IP Address carries no address")


def _network_instance(session: PfcpSession, pdr: Pdr) -> str | None:
    if pdr.pdi.network_instance:
        return pdr.pdi.network_instance
    far = session.fars[pdr.far_id]
    if far.network_instance:
        return far.network_instance
    for other in session.pdrs.values():
        if other.pdi.network_instance:
            return other.pdi.network_instance
    return None


def compile_session(
    session: PfcpSession,
    policy: InstancePolicy,
    gateways: Mapping[str, GatewayHandle],
) -> dict[str, list[Rule]]:
    """Translate one PFCP session into rules, grouped by owning gateway.

    Rule ids are left at 0; the caller assigns them at install time.
    """
    out: dict[str, list[Rule]] = {}
    access_gws = [g for g in gateways.values() if g.access]
    session_qfi = next((p.pdi.qfi for p in session.access_pdrs() if p.pdi.qfi is not None), None)

    for pdr in session.access_pdrs():
        far = session.fars[pdr.far_id]
        if not far.apply_action & pfcp.ApplyAction.FORW or pdr.pdi.f_teid.teid is None:
            continue
        ni = _network_instance(session, pdr)
        if ni not in policy:
            raise UnknownNetworkInstance(ni)
        src_prefix = _ue_prefix(pdr.pdi.ue_ip) if pdr.pdi.ue_ip else None
        rule = UplinkRule(
            rule_id=0,
            teid=pdr.pdi.f_teid.teid,
            action=policy[ni].path,
            qfi=pdr.pdi.qfi,
            inner_src_prefix=src_prefix,
            priority=0xFFFFFFFF - pdr.precedence,
        )
        for gw in access_gws:
            out.setdefault(gw.name, []).append(rule)

    for pdr in session.core_pdrs():
        far = session.fars[pdr.far_id]
        ohc = far.outer_header_creation
        if not far.apply_action & pfcp.ApplyAction.FORW or ohc is None:
            continue
        if ohc.ipv6 is None:
            raise CompileError("downlink Outer Header Creation must carry an IPv6 gNB address")
        ni = _network_instance(session, pdr)
        if ni not in policy:
            raise UnknownNetworkInstance(ni)
        entry = policy[ni]
        serving = next((g for g in access_gws if ohc.ipv6 in g.gnbs), None)
        if serving is None or serving.gtp6e_prefix is None:
            raise CompileError(f"no gateway with a GTP6.E SID serves gNB {ohc.ipv6}")
        qfi = pdr.pdi.qfi if pdr.pdi.qfi is not None else (session_qfi or 0)
        sid = encode_gtp6e_sid(serving.gtp6e_prefix, ohc.teid, qfi)
        path = SegmentList([*entry.reverse_waypoints(), sid, ohc.ipv6])
        rule = DownlinkRule(0, _ue_prefix(pdr.pdi.ue_ip), path)
        out.setdefault(entry.gateway, []).append(rule)
    return out


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------

PushHook = Callable[[str, RuleTable, list[Rule], list[int]], None]


class Controller:
    def __init__(
        self,
        node_id: NodeId,
        address: IPv6Address,
        gateways: Iterable[GatewayHandle],
        policy: Mapping[str, PolicyEntry] | None = None,
        recovery_ts: int = DEFAULT_RECOVERY_TS,
        on_push: PushHook | None = None,
    ):
        self.node_id = node_id
        self.address = address
        self.gateways: dict[str, GatewayHandle] = {g.name: g for g in gateways}
        self.policy: dict[str, PolicyEntry] = dict(policy or {})
        self.recovery_ts = recovery_ts
        self.on_push = on_push
        self.associations: dict[str, NodeId] = {}
        self.sessions: dict[int, PfcpSession] = {}
        self._installed: dict[object, dict[str, dict[tuple, int]]] = {}
        self._cache: OrderedDict[int, tuple[bytes, bytes]] = OrderedDict()
        self._next_seid = 1
        self._next_rule_id = 1
        self._next_teid = 0x10000

    # -- northbound -------------------------------------------------------

    def handle(self, data: bytes) -> bytes | None:
        """Process one PFCP datagram and return the encoded response."""
        msg = pfcp.decode_pfcp(data)
        cached = self._cache.get(msg.sequence)
        if cached is not None and cached[0] == bytes(data):
            return cached[1]
        resp = self.handle_message(msg)
        if resp is None:
            return None
        out = pfcp.encode_pfcp(resp)
        self._cache[msg.sequence] = (bytes(data), out)
        self._cache.move_to_end(msg.sequence)
        while len(self._cache) > RESPONSE_CACHE_DEPTH:
            self._cache.popitem(last=False)
        return out

    def handle_message(self, msg: PfcpMessage) -> PfcpMessage | None:
        handlers = {
            MsgType.HEARTBEAT_REQUEST: self.handle_heartbeat,
            MsgType.ASSOCIATION_SETUP_REQUEST: self.handle_association_setup,
            MsgType.SESSION_ESTABLISHMENT_REQUEST: self.handle_session_establishment,
            MsgType.SESSION_MODIFICATION_REQUEST: self.handle_session_modification,
            MsgType.SESSION_DELETION_REQUEST: self.handle_session_deletion,
        }
        handler = handlers.get(msg.message_type)
        if handler is None:
            log.warning("ignoring PFCP message type %d", msg.message_type)
            return None
        return handler(msg)

    def handle_heartbeat(self, msg: PfcpMessage) -> PfcpMessage:
        return PfcpMessage(MsgType.HEARTBEAT_RESPONSE, msg.sequence, [pfcp.recovery_ie(self.recovery_ts)])

    def handle_association_setup(self, msg: PfcpMessage) -> PfcpMessage:
        ies = [self.node_id.to_ie()]
        node = msg.find(IeType.NODE_ID)
        if node is None:
            cause = Cause.MANDATORY_IE_MISSING
        else:
            peer = NodeId.from_ie(node)
            self.associations[str(peer)] = peer
            cause = Cause.REQUEST_ACCEPTED
        ies += [pfcp.cause_ie(cause), pfcp.recovery_ie(self.recovery_ts)]
        return PfcpMessage(MsgType.ASSOCIATION_SETUP_RESPONSE, msg.sequence, ies)

    def _session_reply(self, mtype: MsgType, msg: PfcpMessage, seid: int, cause: int, extra=()) -> PfcpMessage:
        ies = [pfcp.cause_ie(cause), *extra]
        if mtype == MsgType.SESSION_ESTABLISHMENT_RESPONSE:
            ies.insert(0, self.node_id.to_ie())
        return PfcpMessage(mtype, msg.sequence, ies, seid=seid)

    def handle_session_establishment(self, msg: PfcpMessage) -> PfcpMessage:
        mtype = MsgType.SESSION_ESTABLISHMENT_RESPONSE
        fseid_ie = msg.find(IeType.F_SEID)
        cp = FSeid.from_ie(fseid_ie) if fseid_ie else None
        reply_seid = cp.seid if cp else 0
        if not self.associations:
            return self._session_reply(mtype, msg, reply_seid, Cause.NO_ESTABLISHED_ASSOCIATION)
        try:
            if cp is None:
                raise MissingIe("Session Establishment: missing F-SEID")
            session = PfcpSession(cp, FSeid(self._next_seid, ipv6=self.address))
            created = []
            for ie in msg.find_all(IeType.CREATE_FAR):
                far = far_from_ie(ie)
                session.fars[far.far_id] = far
            for ie in msg.find_all(IeType.CREATE_PDR):
                pdr = pdr_from_ie(ie)
                if pdr.pdi.f_teid is not None and pdr.pdi.f_teid.choose:
                    fteid = FTeid(self._next_teid + len(created), ipv6=self.address)
                    pdr = replace(pdr, pdi=replace(pdr.pdi, f_teid=fteid))
                    created.append(pfcp.group(IeType.CREATED_PDR, pfcp.pdr_id_ie(pdr.pdr_id), fteid.to_ie()))
                session.pdrs[pdr.pdr_id] = pdr
            if not session.access_pdrs():
                raise MissingIe("no access-side PDR")
            if not session.core_pdrs():
                raise MissingIe("no core-side PDR")
            session.validate()
            self._reconcile({session.up_fseid.seid: compile_session(session, self.policy, self.gateways)})
        except (SessionError, pfcp.PfcpError, RuleError) as exc:
            log.info("session establishment rejected: %s", exc)
            return self._session_reply(mtype, msg, reply_seid, getattr(exc, "cause", Cause.REQUEST_REJECTED))
        self._next_seid += 1
        self._next_teid += len(created)
        self.sessions[session.up_fseid.seid] = session
        return self._session_reply(mtype, msg, cp.seid, Cause.REQUEST_ACCEPTED, [session.up_fseid.to_ie(), *created])

    def handle_session_modification(self, msg: PfcpMessage) -> PfcpMessage:
        mtype = MsgType.SESSION_MODIFICATION_RESPONSE
        session = self.sessions.get(msg.seid)
        if session is None:
            return self._session_reply(mtype, msg, 0, Cause.SESSION_CONTEXT_NOT_FOUND)
        new = session.copy()
        try:
            for ie in msg.find_all(IeType.REMOVE_PDR):
                new.pdrs.pop(pfcp.int_value(_required(ie, IeType.PDR_ID, "Remove PDR")), None)
            for ie in msg.find_all(IeType.REMOVE_FAR):
                new.fars.pop(pfcp.int_value(_required(ie, IeType.FAR_ID, "Remove FAR")), None)
            for ie in msg.find_all(IeType.CREATE_FAR):
                far = far_from_ie(ie)
                new.fars[far.far_id] = far
            for ie in msg.find_all(IeType.CREATE_PDR):
                pdr = pdr_from_ie(ie)
                new.pdrs[pdr.pdr_id] = pdr
            for ie in msg.find_all(IeType.UPDATE_FAR):
                fid = pfcp.int_value(_required(ie, IeType.FAR_ID, "Update FAR"))
                if fid not in new.fars:
                    raise SessionError(Cause.MANDATORY_IE_INCORRECT, f"Update FAR for unknown FAR {fid}")
                new.fars[fid] = _update_far(new.fars[fid], ie)
            for ie in msg.find_all(IeType.UPDATE_PDR):
                pid = pfcp.int_value(_required(ie, IeType.PDR_ID, "Update PDR"))
                if pid not in new.pdrs:
                    raise SessionError(Cause.MANDATORY_IE_INCORRECT, f"Update PDR for unknown PDR {pid}")
                new.pdrs[pid] = _update_pdr(new.pdrs[pid], ie)
            new.validate()
            self._reconcile({msg.seid: compile_session(new, self.policy, self.gateways)})
        except (SessionError, pfcp.PfcpError, RuleError) as exc:
            log.info("session modification rejected: %s", exc)
            return self._session_reply(mtype, msg, session.cp_fseid.seid, getattr(exc, "cause", Cause.REQUEST_REJECTED))
        self.sessions[msg.seid] = new
        return self._session_reply(mtype, msg, session.cp_fseid.seid, Cause.REQUEST_ACCEPTED)

    def handle_session_deletion(self, msg: PfcpMessage) -> PfcpMessage:
        mtype = MsgType.SESSION_DELETION_RESPONSE
        session = self.sessions.get(msg.seid)
        if session is None:
            return self._session_reply(mtype, msg, 0, Cause.SESSION_CONTEXT_NOT_FOUND)
        self._reconcile({msg.seid: None})
        del self.sessions[msg.seid]
        return self._session_reply(mtype, msg, session.cp_fseid.seid, Cause.REQUEST_ACCEPTED)

    # -- policy -----------------------------------------------------------

    def update_policy(self, network_instance: str, entry: PolicyEntry | None) -> None:
        """Rebind a slice and recompile every session that uses it, atomically."""
        policy = dict(self.policy)
        if entry is None:
            policy.pop(network_instance, None)
        else:
            if entry.gateway not in self.gateways:
                raise CompileError(f"unknown gateway {entry.gateway!r}")
            policy[network_instance] = entry
        desired = {}
        for seid, session in self.sessions.items():
            uses = {_network_instance(session, p) for p in session.pdrs.values()}
            if network_instance in uses:
                desired[seid] = compile_session(session, policy, self.gateways)
        self._reconcile(desired)
        self.policy = policy

    # -- southbound -------------------------------------------------------

    def install_static(self, gateway: str, rules: Sequence[Rule]) -> None:
        """Replace the configuration-defined rules of ``gateway``."""
        self._reconcile({("static", gateway): {gateway: list(rules)}})

    def _reconcile(self, desired: Mapping[object, Mapping[str, Sequence[Rule]] | None]) -> None:
        """Bring the rules owned by each key to ``desired``; all gateways or none."""
        adds: dict[str, list[Rule]] = {}
        removes: dict[str, list[int]] = {}
        bookkeeping: dict[object, dict[str, dict[tuple, int]]] = {}
        next_id = self._next_rule_id
        for key, per_gw in desired.items():
            old = self._installed.get(key, {})
            new: dict[str, dict[tuple, int]] = {}
            for gw in set(old) | set(per_gw or {}):
                if gw not in self.gateways:
                    raise CompileError(f"unknown gateway {gw!r}")
                have = old.get(gw, {})
                want = {}
                for rule in (per_gw or {}).get(gw, ()):
                    want.setdefault(rule.content(), rule)
                kept = {c: rid for c, rid in have.items() if c in want}
                removes.setdefault(gw, []).extend(rid for c, rid in have.items() if c not in want)
                for content, rule in want.items():
                    if content not in kept:
                        kept[content] = next_id
                        adds.setdefault(gw, []).append(replace(rule, rule_id=next_id))
                        next_id += 1
                if kept:
                    new[gw] = kept
            bookkeeping[key] = new
        touched = [gw for gw in self.gateways if adds.get(gw) or removes.get(gw)]
        prepared = {gw: self.gateways[gw].store.prepare(adds.get(gw, ()), removes.get(gw, ())) for gw in touched}
        for gw, table in prepared.items():
            self.gateways[gw].store.commit(table)
            if self.on_push is not None:
                self.on_push(gw, table, adds.get(gw, []), removes.get(gw, []))
        self._next_rule_id = next_id
        for key, new in bookkeeping.items():
            if new:
                self._installed[key] = new
            else:
                self._installed.pop(key, None)

    def rule_count(self, gateway: str) -> int:
        return len(self.gateways[gateway].store.snapshot())
