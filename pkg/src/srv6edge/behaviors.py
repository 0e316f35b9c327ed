"""SRv6 endpoint behaviors and SR encapsulation.

Each behavior is a pure function of the packet, its binding and (for
GTP6.D) a rule-table snapshot.  None of them mutate shared state; drops are
returned as values so the caller can record them.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from ipaddress import IPv4Address, IPv6Address, IPv6Network, ip_address
from typing import Mapping, Sequence, Union

from . import wire
from .wire import (
    GTPU_ECHO_REQUEST,
    GTPU_ECHO_RESPONSE,
    GTPU_GPDU,
    GTPU_PORT,
    IPPROTO_IPIP,
    IPPROTO_IPV6,
    IPPROTO_ROUTING,
    IPPROTO_UDP,
    PDU_TYPE_DOWNLINK,
    CodecError,
    GtpuHeader,
    InnerPdu,
    Ipv6Header,
    SegmentRoutingHeader,
)

GTP6E_ARG_BITS = 40
DEFAULT_HOP_LIMIT = 64
GTPU_RECOVERY_IE = b"\x0e\x00"


class BehaviorError(ValueError):
    pass


class EmptyPath(BehaviorError):
    pass


class PrefixTooLong(BehaviorError):
    pass


class BehaviorKind(str, enum.Enum):
    END = "End"
    GTP6_D = "End.M.GTP6.D"
    GTP6_E = "End.M.GTP6.E"
    DT4 = "End.DT4"
    DT6 = "End.DT6"


@dataclass(frozen=True)
class Sid:
    """A segment identifier split into locator, function and argument bits."""

    value: IPv6Address
    locator_len: int
    function_len: int = 0

    def __post_init__(self) -> None:
        if self.locator_len < 0 or self.function_len < 0:
            raise ValueError("negative SID field length")
        if self.locator_len + self.function_len > 128:
            raise ValueError("locator + function exceed 128 bits")

    @property
    def argument_len(self) -> int:
        return 128 - self.locator_len - self.function_len

    @property
    def locator(self) -> IPv6Network:
        return IPv6Network((int(self.value), self.locator_len), strict=False)

    @property
    def argument(self) -> int:
        return int(self.value) & ((1 << self.argument_len) - 1)


class SegmentList(tuple):
    """Path-ordered SIDs; the first element is the first waypoint."""

    def __new__(cls, segments: Sequence[IPv6Address | str] = ()):
        items = tuple(IPv6Address(s) for s in segments)
        if not items:
            raise EmptyPath("segment list must not be empty")
        return super().__new__(cls, items)

    def wire_order(self) -> tuple[IPv6Address, ...]:
        return tuple(reversed(self))

    def __repr__(self) -> str:
        return "SegmentList[" + ", ".join(str(s) for s in self) + "]"


@dataclass(frozen=True)
class BehaviorBinding:
    prefix: IPv6Network
    kind: BehaviorKind
    source: IPv6Address | None = None  # outer src for packets this behavior originates
    table: int = 0


@dataclass(frozen=True)
class Forward:
    packet: bytes
    next_hop_dst: IPv6Address
    new_outer: bool = False  # True when this node built a fresh outer header


@dataclass(frozen=True)
class Drop:
    reason: str
    detail: str = ""


@dataclass(frozen=True)
class LocalDeliver:
    host: str
    pdu: bytes


ForwardDecision = Union[Forward, Drop, LocalDeliver]


# ---------------------------------------------------------------------------
# GTP6.E argument encoding: qfi(6) | reserved(2) | teid(32) in the low 40 bits
# ---------------------------------------------------------------------------


def encode_gtp6e_sid(prefix: IPv6Network | str, teid: int, qfi: int) -> IPv6Address:
    prefix = IPv6Network(prefix)
    if prefix.prefixlen > 128 - GTP6E_ARG_BITS:
        raise PrefixTooLong(f"{prefix} leaves fewer than {GTP6E_ARG_BITS} argument bits")
    if not 0 <= teid < 1 << 32:
        raise ValueError(f"teid out of range: {teid}")
    if not 0 <= qfi < 64:
        raise ValueError(f"qfi out of range: {qfi}")
    return IPv6Address(int(prefix.network_address) | (qfi << 34) | teid)


def decode_gtp6e_sid(sid: IPv6Address) -> tuple[int, int]:
    """Return ``(teid, qfi)`` from the argument bits of a GTP6.E SID."""
    v = int(sid)
    return v & 0xFFFFFFFF, (v >> 34) & 0x3F


# ---------------------------------------------------------------------------
# Encapsulation helpers
# ---------------------------------------------------------------------------


def h_encaps(
    inner: InnerPdu,
    path: Sequence[IPv6Address],
    src: IPv6Address,
    hop_limit: int = DEFAULT_HOP_LIMIT,
) -> bytes:
    """Wrap ``inner`` in an outer IPv6 header steering it along ``path``.

    A one-segment path yields plain IPv6-in-IP with no SRH.
    """
    if not path:
        raise EmptyPath("cannot encapsulate onto an empty path")
    path = SegmentList(path)
    if len(path) == 1:
        outer = Ipv6Header(src, path[0], inner.protocol_number, hop_limit)
        return wire.serialize_ipv6(outer, inner.data)
    srh = SegmentRoutingHeader(inner.protocol_number, len(path) - 1, path.wire_order())
    outer = Ipv6Header(src, path[0], IPPROTO_ROUTING, hop_limit)
    return wire.serialize_ipv6(outer, wire.serialize_srh(srh) + inner.data)


def decapsulate(packet: bytes) -> tuple[Ipv6Header, SegmentRoutingHeader | None, InnerPdu]:
    """Strip the outer IPv6 header (and SRH, if any) and return the inner PDU."""
    ip, rest = wire.parse_ipv6(packet)
    srh = None
    nxt = ip.next_header
    if nxt == IPPROTO_ROUTING:
        srh, rest = wire.parse_srh(rest)
        nxt = srh.next_header
    if nxt not in (IPPROTO_IPV6, IPPROTO_IPIP):
        raise CodecError(f"no IP-in-IP payload (next header {nxt})")
    inner = InnerPdu(rest)
    if inner.protocol_number != nxt:
        raise CodecError("inner version does not match next header")
    return ip, srh, inner


# ---------------------------------------------------------------------------
# Behaviors
# ---------------------------------------------------------------------------


def behavior_end(packet: bytes, binding: BehaviorBinding) -> ForwardDecision:
    try:
        ip, rest = wire.parse_ipv6(packet)
    except CodecError as exc:
        return Drop("Malformed", str(exc))
    if ip.next_header != IPPROTO_ROUTING:
        return Drop("NoSrh")
    try:
        srh, _ = wire.parse_srh(rest)
    except CodecError as exc:
        return Drop("Malformed", str(exc))
    if srh.segments_left == 0:
        return Drop("SegmentsLeftZero")
    sl = srh.segments_left - 1
    new_dst = srh.segments[sl]
    out = bytearray(packet)
    out[24:40] = new_dst.packed
    out[wire.IPV6_HEADER_LEN + 3] = sl
    return Forward(bytes(out), new_dst)


def _gtpu_echo_reply(ip: Ipv6Header, udp: wire.UdpHeader, gtp: GtpuHeader, src: IPv6Address) -> bytes:
    reply = GtpuHeader(teid=0, message_type=GTPU_ECHO_RESPONSE, sequence=gtp.sequence or 0)
    body = wire.serialize_gtpu(reply, GTPU_RECOVERY_IE)
    seg = wire.build_udp(src, ip.src, GTPU_PORT, udp.src_port, body)
    return wire.serialize_ipv6(Ipv6Header(src, ip.src, IPPROTO_UDP, DEFAULT_HOP_LIMIT), seg)


def behavior_gtp6_d(packet: bytes, binding: BehaviorBinding, uplink_rules) -> ForwardDecision:
    """GTP-U to SRv6 at the gNB-side gateway.

    ``uplink_rules`` is a :class:`~srv6edge.rules.RuleTable` snapshot.  GTP-U
    echo requests are answered here instead of being mapped.
    """
    from .rules import NoMatch

    try:
        ip, rest = wire.parse_ipv6(packet)
        if ip.next_header != IPPROTO_UDP:
            return Drop("NotGtpu", f"next header {ip.next_header}")
        udp, rest = wire.parse_udp(ip.src, ip.dst, rest)
        if udp.dst_port != GTPU_PORT:
            return Drop("NotGtpu", f"UDP port {udp.dst_port}")
        gtp, inner_bytes = wire.parse_gtpu(rest)
    except CodecError as exc:
        return Drop("NotGtpu", f"{type(exc).__name__}: {exc}")
    source = binding.source or ip.dst
    if gtp.message_type == GTPU_ECHO_REQUEST:
        return Forward(_gtpu_echo_reply(ip, udp, gtp, source), ip.src, new_outer=True)
    if gtp.message_type != GTPU_GPDU:
        return Drop("NotGtpu", f"message type {gtp.message_type}")
    try:
        inner = InnerPdu(inner_bytes)
        inner_src = inner.src
    except CodecError as exc:
        return Drop("Malformed", str(exc))
    try:
        path = uplink_rules.classify_uplink(gtp.teid, gtp.qfi, inner_src)
    except NoMatch:
        return Drop("NoMatchingRule", f"teid={gtp.teid} qfi={gtp.qfi}")
    out = h_encaps(inner, path, source)
    return Forward(out, path[0], new_outer=True)


def behavior_gtp6_e(packet: bytes, binding: BehaviorBinding) -> ForwardDecision:
    """SRv6 to GTP-U toward the gNB whose address is the last segment."""
    try:
        ip, srh, inner = decapsulate(packet)
    except CodecError as exc:
        return Drop("Malformed", str(exc))
    if srh is None:
        return Drop("NoSrh")
    if srh.segments_left != 1:
        return Drop("BadSegmentsLeft", f"segments_left={srh.segments_left}")
    teid, qfi = decode_gtp6e_sid(ip.dst)
    gnb = srh.segments[0]
    source = binding.source or ip.dst
    gtp = wire.gpdu_header(teid, qfi, PDU_TYPE_DOWNLINK)
    body = wire.serialize_gtpu(gtp, inner.data)
    seg = wire.build_udp(source, gnb, GTPU_PORT, GTPU_PORT, body)
    out = wire.serialize_ipv6(Ipv6Header(source, gnb, IPPROTO_UDP, DEFAULT_HOP_LIMIT), seg)
    return Forward(out, gnb, new_outer=True)


def behavior_dt(
    packet: bytes,
    binding: BehaviorBinding,
    hosts: Mapping[IPv4Address | IPv6Address, str],
) -> ForwardDecision:
    """Decapsulate and hand the inner PDU to the attached host it is addressed to."""
    try:
        _, srh, inner = decapsulate(packet)
    except CodecError as exc:
        return Drop("Malformed", str(exc))
    if srh is not None and srh.segments_left != 0:
        return Drop("BadSegmentsLeft", f"segments_left={srh.segments_left}")
    want = 6 if binding.kind is BehaviorKind.DT6 else 4
    if inner.ip_version != want:
        return Drop("WrongInnerVersion", f"IPv{inner.ip_version} at {binding.kind.value}")
    host = hosts.get(inner.dst)
    if host is None:
        return Drop("NoAttachedHost", str(inner.dst))
    return LocalDeliver(host, inner.data)


def run_behavior(packet: bytes, binding: BehaviorBinding, *, uplink_rules=None, hosts=None) -> ForwardDecision:
    kind = binding.kind
    if kind is BehaviorKind.END:
        return behavior_end(packet, binding)
    if kind is BehaviorKind.GTP6_D:
        return behavior_gtp6_d(packet, binding, uplink_rules)
    if kind is BehaviorKind.GTP6_E:
        return behavior_gtp6_e(packet, binding)
    return behavior_dt(packet, binding, hosts or {})


def parse_address(text: str) -> IPv4Address | IPv6Address:
    return ip_address(text.strip())
