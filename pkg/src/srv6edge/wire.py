"""Bit-exact codecs for the headers the user plane touches.

IPv6, the Segment Routing Header (routing type 4), UDP and GTP-U with the
PDU Session Container extension.  Every parser is strict: a declared length
that does not match the bytes on hand is an error, never a partial result.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from ipaddress import IPv4Address, IPv6Address
from typing import Union

IPPROTO_IPIP = 4
IPPROTO_UDP = 17
IPPROTO_IPV6 = 41
IPPROTO_ROUTING = 43
IPPROTO_NONE = 59

SRH_ROUTING_TYPE = 4
GTPU_PORT = 2152
PFCP_PORT = 8805

GTPU_ECHO_REQUEST = 1
GTPU_ECHO_RESPONSE = 2
GTPU_GPDU = 255
GTPU_MESSAGE_TYPES = frozenset({GTPU_ECHO_REQUEST, GTPU_ECHO_RESPONSE, GTPU_GPDU})

EXT_PDU_SESSION_CONTAINER = 0x85
PDU_TYPE_DOWNLINK = 0
PDU_TYPE_UPLINK = 1

IPV6_HEADER_LEN = 40
SRH_FIXED_LEN = 8
UDP_HEADER_LEN = 8
GTPU_HEADER_LEN = 8
MAX_SRH_SEGMENTS = 127


class CodecError(ValueError):
    """Base class for every decode/encode failure."""


class TooShort(CodecError):
    pass


class BadVersion(CodecError):
    pass


class LengthMismatch(CodecError):
    pass


class Oversize(CodecError):
    pass


class WrongRoutingType(CodecError):
    pass


class LengthInconsistent(CodecError):
    pass


class EmptySegmentList(CodecError):
    pass


class UnsupportedMessageType(CodecError):
    pass


class BadExtensionChain(CodecError):
    pass


class BadChecksum(CodecError):
    pass


def _need(data: bytes, n: int, what: str) -> None:
    if len(data) < n:
        raise TooShort(f"{what}: need {n} octets, got {len(data)}")


# ---------------------------------------------------------------------------
# IPv6
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ipv6Header:
    """
     0                   1                   2                   3
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |Version| Traffic Class |           Flow Label                  |
    |         Payload Length        |  Next Header  |   Hop Limit   |
    |                    Source Address (128)                       |
    |                 Destination Address (128)                     |
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    """

    src: IPv6Address
    dst: IPv6Address
    next_header: int
    hop_limit: int = 64
    traffic_class: int = 0
    flow_label: int = 0
    payload_length: int = field(default=0, compare=False)  # as seen on the wire
    version: int = 6

    def __post_init__(self) -> None:
        if self.version != 6:
            raise BadVersion(f"IPv6 version must be 6, got {self.version}")
        if not 0 <= self.flow_label < 1 << 20:
            raise ValueError(f"flow label out of range: {self.flow_label}")
        for name in ("traffic_class", "next_header", "hop_limit"):
            if not 0 <= getattr(self, name) < 256:
                raise ValueError(f"{name} out of range")


def parse_ipv6(data: bytes) -> tuple[Ipv6Header, bytes]:
    _need(data, IPV6_HEADER_LEN, "IPv6 header")
    word, plen, nxt, hlim = struct.unpack_from("!IHBB", data)
    if word >> 28 != 6:
        raise BadVersion(f"IPv6 version nibble is {word >> 28}")
    payload = data[IPV6_HEADER_LEN:]
    if len(payload) != plen:
        raise LengthMismatch(f"IPv6 payload_length {plen} but {len(payload)} octets follow")
    header = Ipv6Header(
        src=IPv6Address(bytes(data[8:24])),
        dst=IPv6Address(bytes(data[24:40])),
        next_header=nxt,
        hop_limit=hlim,
        traffic_class=(word >> 20) & 0xFF,
        flow_label=word & 0xFFFFF,
        payload_length=plen,
    )
    return header, bytes(payload)


def serialize_ipv6(header: Ipv6Header, payload: bytes) -> bytes:
    if len(payload) > 0xFFFF:
        raise Oversize(f"IPv6 payload of {len(payload)} octets exceeds 65535")
    word = (6 << 28) | (header.traffic_class << 20) | header.flow_label
    return (
        struct.pack("!IHBB", word, len(payload), header.next_header, header.hop_limit)
        + header.src.packed
        + header.dst.packed
        + bytes(payload)
    )


# ---------------------------------------------------------------------------
# Segment Routing Header
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SegmentRoutingHeader:
    """SRH with segments in wire order: ``segments[0]`` is the final segment."""

    next_header: int
    segments_left: int
    segments: tuple[IPv6Address, ...]
    flags: int = 0
    tag: int = 0

    @property
    def last_entry(self) -> int:
        return len(self.segments) - 1

    @property
    def hdr_ext_len(self) -> int:
        return 2 * len(self.segments)

    @property
    def routing_type(self) -> int:
        return SRH_ROUTING_TYPE

    @property
    def active_segment(self) -> IPv6Address:
        return self.segments[self.segments_left]

    def __len__(self) -> int:
        return SRH_FIXED_LEN + 16 * len(self.segments)


def parse_srh(data: bytes) -> tuple[SegmentRoutingHeader, bytes]:
    _need(data, SRH_FIXED_LEN, "SRH")
    nxt, ext_len, rtype, sl, last_entry, flags, tag = struct.unpack_from("!BBBBBBH", data)
    if rtype != SRH_ROUTING_TYPE:
        raise WrongRoutingType(f"routing type {rtype}, expected {SRH_ROUTING_TYPE}")
    count = last_entry + 1
    if ext_len != 2 * count:
        raise LengthInconsistent(f"hdr_ext_len {ext_len} != 2 x {count} segments")
    if sl > count:
        raise LengthInconsistent(f"segments_left {sl} exceeds last_entry + 1 = {count}")
    total = SRH_FIXED_LEN + 16 * count
    _need(data, total, "SRH segment list")
    segments = tuple(
        IPv6Address(bytes(data[off : off + 16])) for off in range(SRH_FIXED_LEN, total, 16)
    )
    srh = SegmentRoutingHeader(nxt, sl, segments, flags, tag)
    return srh, bytes(data[total:])


def serialize_srh(srh: SegmentRoutingHeader) -> bytes:
    count = len(srh.segments)
    if count == 0:
        raise EmptySegmentList("SRH needs at least one segment")
    if count > MAX_SRH_SEGMENTS:
        raise Oversize(f"{count} segments exceed {MAX_SRH_SEGMENTS}")
    if not 0 <= srh.segments_left <= count:
        raise LengthInconsistent(f"segments_left {srh.segments_left} out of range")
    head = struct.pack(
        "!BBBBBBH",
        srh.next_header,
        2 * count,
        SRH_ROUTING_TYPE,
        srh.segments_left,
        count - 1,
        srh.flags,
        srh.tag,
    )
    return head + b"".join(s.packed for s in srh.segments)


# ---------------------------------------------------------------------------
# UDP
# ---------------------------------------------------------------------------


def _ones_complement_sum(data: bytes) -> int:
    if len(data) % 2:
        data = data + b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return total


def compute_udp_checksum(src: IPv6Address, dst: IPv6Address, udp_segment: bytes) -> int:
    """Checksum over the IPv6 pseudo-header and ``udp_segment``.

    The checksum field of ``udp_segment`` is treated as zero.  A computed
    value of zero is returned as 0xFFFF.
    """
    _need(udp_segment, UDP_HEADER_LEN, "UDP segment")
    pseudo = src.packed + dst.packed + struct.pack("!I3xB", len(udp_segment), IPPROTO_UDP)
    segment = bytes(udp_segment[:6]) + b"\x00\x00" + bytes(udp_segment[8:])
    csum = ~_ones_complement_sum(pseudo + segment) & 0xFFFF
    return csum or 0xFFFF


@dataclass(frozen=True)
class UdpHeader:
    src_port: int
    dst_port: int
    length: int
    checksum: int


def build_udp(src: IPv6Address, dst: IPv6Address, sport: int, dport: int, payload: bytes) -> bytes:
    length = UDP_HEADER_LEN + len(payload)
    if length > 0xFFFF:
        raise Oversize(f"UDP datagram of {length} octets")
    segment = struct.pack("!HHHH", sport, dport, length, 0) + bytes(payload)
    csum = compute_udp_checksum(src, dst, segment)
    return segment[:6] + struct.pack("!H", csum) + segment[8:]


def parse_udp(src: IPv6Address, dst: IPv6Address, segment: bytes) -> tuple[UdpHeader, bytes]:
    """Decode and verify a UDP segment carried over IPv6."""
    _need(segment, UDP_HEADER_LEN, "UDP header")
    sport, dport, length, csum = struct.unpack_from("!HHHH", segment)
    if length != len(segment):
        raise LengthMismatch(f"UDP length {length} but segment has {len(segment)} octets")
    if csum == 0:
        raise BadChecksum("zero UDP checksum is not allowed over IPv6")
    expected = compute_udp_checksum(src, dst, segment)
    if csum != expected:
        raise BadChecksum(f"UDP checksum 0x{csum:04x}, expected 0x{expected:04x}")
    return UdpHeader(sport, dport, length, csum), bytes(segment[UDP_HEADER_LEN:])


# ---------------------------------------------------------------------------
# GTP-U
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PduSessionContainer:
    """PDU Session Container extension (type 0x85).

    ``flags`` keeps the remaining bits of the first two content octets
    (low nibble of octet 0 in bits 5..2, top two bits of octet 1 in bits 1..0)
    so that containers with QMP/SNP/RQI and friends round-trip untouched.
    ``extra`` holds content octets beyond the first two.
    """

    pdu_type: int
    qfi: int
    flags: int = 0
    extra: bytes = b""

    def __post_init__(self) -> None:
        if not 0 <= self.qfi < 64:
            raise ValueError(f"qfi must be < 64, got {self.qfi}")
        if not 0 <= self.pdu_type < 16:
            raise ValueError(f"pdu_type out of range: {self.pdu_type}")
        if (2 + len(self.extra) + 2) % 4:
            raise ValueError("PDU Session Container content must pad to 4-octet units")

    @property
    def ext_type(self) -> int:
        return EXT_PDU_SESSION_CONTAINER

    def content(self) -> bytes:
        b0 = (self.pdu_type << 4) | ((self.flags >> 2) & 0x0F)
        b1 = ((self.flags & 0x03) << 6) | self.qfi
        return bytes((b0, b1)) + self.extra

    @classmethod
    def from_content(cls, content: bytes) -> PduSessionContainer:
        if len(content) < 2:
            raise BadExtensionChain("PDU Session Container too short")
        b0, b1 = content[0], content[1]
        return cls(b0 >> 4, b1 & 0x3F, ((b0 & 0x0F) << 2) | (b1 >> 6), bytes(content[2:]))


@dataclass(frozen=True)
class RawExtension:
    """Any GTP-U extension header we do not interpret, kept byte-identical."""

    ext_type: int
    body: bytes

    def __post_init__(self) -> None:
        if (len(self.body) + 2) % 4:
            raise ValueError("extension content must pad to 4-octet units")

    def content(self) -> bytes:
        return self.body


GtpuExtension = Union[PduSessionContainer, RawExtension]


@dataclass(frozen=True)
class GtpuHeader:
    teid: int
    message_type: int = GTPU_GPDU
    sequence: int | None = None
    npdu: int | None = None
    extensions: tuple[GtpuExtension, ...] = ()
    length: int = field(default=0, compare=False)  # as seen on the wire

    @property
    def version(self) -> int:
        return 1

    @property
    def e_flag(self) -> bool:
        return bool(self.extensions)

    @property
    def s_flag(self) -> bool:
        return self.sequence is not None

    @property
    def pn_flag(self) -> bool:
        return self.npdu is not None

    @property
    def pdu_session(self) -> PduSessionContainer | None:
        for ext in self.extensions:
            if isinstance(ext, PduSessionContainer):
                return ext
        return None

    @property
    def qfi(self) -> int | None:
        psc = self.pdu_session
        return None if psc is None else psc.qfi


def gpdu_header(teid: int, qfi: int | None = None, pdu_type: int = PDU_TYPE_UPLINK) -> GtpuHeader:
    """G-PDU header, with a PDU Session Container when ``qfi`` is given."""
    exts: tuple[GtpuExtension, ...] = ()
    if qfi is not None:
        exts = (PduSessionContainer(pdu_type, qfi),)
    return GtpuHeader(teid=teid, extensions=exts)


def parse_gtpu(data: bytes) -> tuple[GtpuHeader, bytes]:
    _need(data, GTPU_HEADER_LEN, "GTP-U header")
    flags, mtype, length, teid = struct.unpack_from("!BBHI", data)
    if flags >> 5 != 1:
        raise BadVersion(f"GTP version {flags >> 5}")
    if not flags & 0x10:
        raise BadVersion("GTP' (PT=0) is not GTP-U")
    if mtype not in GTPU_MESSAGE_TYPES:
        raise UnsupportedMessageType(f"GTP-U message type {mtype}")
    body = data[GTPU_HEADER_LEN:]
    if len(body) != length:
        raise LengthMismatch(f"GTP-U length {length} but {len(body)} octets follow")
    e, s, pn = bool(flags & 0x04), bool(flags & 0x02), bool(flags & 0x01)
    seq = npdu = None
    exts: list[GtpuExtension] = []
    pos = 0
    if e or s or pn:
        _need(body, 4, "GTP-U optional fields")
        raw_seq, raw_npdu, next_type = struct.unpack_from("!HBB", body)
        pos = 4
        seq = raw_seq if s else None
        npdu = raw_npdu if pn else None
        if e and next_type == 0:
            raise BadExtensionChain("E flag set but no extension header follows")
        if not e and next_type != 0:
            raise BadExtensionChain("extension header present without E flag")
        while next_type:
            if pos >= len(body):
                raise BadExtensionChain("extension chain runs past the packet")
            units = body[pos]
            if units == 0:
                raise BadExtensionChain("zero-length extension header")
            end = pos + 4 * units
            if end > len(body):
                raise BadExtensionChain("extension header overruns the packet")
            content = bytes(body[pos + 1 : end - 1])
            if next_type == EXT_PDU_SESSION_CONTAINER:
                exts.append(PduSessionContainer.from_content(content))
            else:
                exts.append(RawExtension(next_type, content))
            next_type = body[end - 1]
            pos = end
    header = GtpuHeader(teid, mtype, seq, npdu, tuple(exts), length)
    return header, bytes(body[pos:])


def serialize_gtpu(header: GtpuHeader, inner: bytes) -> bytes:
    opt = b""
    if header.e_flag or header.s_flag or header.pn_flag:
        first = header.extensions[0].ext_type if header.extensions else 0
        opt = struct.pack("!HBB", header.sequence or 0, header.npdu or 0, first)
        for i, ext in enumerate(header.extensions):
            content = ext.content()
            nxt = header.extensions[i + 1].ext_type if i + 1 < len(header.extensions) else 0
            opt += bytes(((len(content) + 2) // 4,)) + content + bytes((nxt,))
    length = len(opt) + len(inner)
    if length > 0xFFFF:
        raise Oversize(f"GTP-U body of {length} octets")
    flags = 0x30 | (header.e_flag << 2) | (header.s_flag << 1) | int(header.pn_flag)
    return struct.pack("!BBHI", flags, header.message_type, length, header.teid) + opt + bytes(inner)


# ---------------------------------------------------------------------------
# Inner PDU and whole-packet dissection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class InnerPdu:
    """An opaque user packet carried through the tunnel."""

    data: bytes

    def __post_init__(self) -> None:
        if not self.data or self.data[0] >> 4 not in (4, 6):
            raise BadVersion("inner PDU is neither IPv4 nor IPv6")

    @property
    def ip_version(self) -> int:
        return self.data[0] >> 4

    @property
    def protocol_number(self) -> int:
        """Next-header value announcing this PDU inside an outer header."""
        return IPPROTO_IPV6 if self.ip_version == 6 else IPPROTO_IPIP

    @property
    def src(self) -> IPv4Address | IPv6Address:
        if self.ip_version == 6:
            _need(self.data, IPV6_HEADER_LEN, "inner IPv6")
            return IPv6Address(self.data[8:24])
        _need(self.data, 20, "inner IPv4")
        return IPv4Address(self.data[12:16])

    @property
    def dst(self) -> IPv4Address | IPv6Address:
        if self.ip_version == 6:
            _need(self.data, IPV6_HEADER_LEN, "inner IPv6")
            return IPv6Address(self.data[24:40])
        _need(self.data, 20, "inner IPv4")
        return IPv4Address(self.data[16:20])


@dataclass
class Dissection:
    """Every layer we could decode from a packet, outermost first."""

    ipv6: Ipv6Header
    srh: SegmentRoutingHeader | None = None
    udp: UdpHeader | None = None
    gtpu: GtpuHeader | None = None
    udp_payload: bytes | None = None
    inner: InnerPdu | None = None
    errors: list[str] = field(default_factory=list)


def pseudo_header_dst(ip: Ipv6Header, srh: SegmentRoutingHeader | None) -> IPv6Address:
    """Upper-layer checksums use the final destination when a routing header is present."""
    return srh.segments[0] if srh is not None else ip.dst


def dissect(packet: bytes) -> Dissection:
    """Best-effort decode of an outer IPv6 packet; inner layers never raise."""
    ip, rest = parse_ipv6(packet)
    d = Dissection(ip)
    nxt = ip.next_header
    try:
        if nxt == IPPROTO_ROUTING:
            d.srh, rest = parse_srh(rest)
            nxt = d.srh.next_header
        if nxt == IPPROTO_UDP:
            d.udp, rest = parse_udp(ip.src, pseudo_header_dst(ip, d.srh), rest)
            d.udp_payload = rest
            if GTPU_PORT in (d.udp.dst_port, d.udp.src_port):
                d.gtpu, rest = parse_gtpu(rest)
                if d.gtpu.message_type == GTPU_GPDU and rest:
                    d.inner = InnerPdu(rest)
        elif nxt in (IPPROTO_IPV6, IPPROTO_IPIP) and rest:
            d.inner = InnerPdu(rest)
    except CodecError as exc:
        d.errors.append(f"{type(exc).__name__}: {exc}")
    return d


def build_inner_ipv6_udp(
    src: IPv6Address,
    dst: IPv6Address,
    payload: bytes,
    sport: int = 40000,
    dport: int = 7,
    hop_limit: int = 64,
) -> bytes:
    """A user-side IPv6/UDP datagram, as a UE or edge host would emit it."""
    udp = build_udp(src, dst, sport, dport, payload)
    return serialize_ipv6(Ipv6Header(src, dst, IPPROTO_UDP, hop_limit), udp)
