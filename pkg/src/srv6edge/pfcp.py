"""Minimal PFCP codec: header, TLV information elements and the scalar IEs
the controller interprets.

Grouped IEs decode into child lists; every other IE keeps its raw value so
unknown or vendor IEs round-trip byte-identically.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from ipaddress import IPv4Address, IPv6Address
from typing import Iterable, Iterator

PFCP_VERSION = 1


class PfcpError(ValueError):
    pass


class TooShort(PfcpError):
    pass


class BadVersion(PfcpError):
    pass


class TlvOverrun(PfcpError):
    pass


class MsgType(enum.IntEnum):
    HEARTBEAT_REQUEST = 1
    HEARTBEAT_RESPONSE = 2
    ASSOCIATION_SETUP_REQUEST = 5
    ASSOCIATION_SETUP_RESPONSE = 6
    SESSION_ESTABLISHMENT_REQUEST = 50
    SESSION_ESTABLISHMENT_RESPONSE = 51
    SESSION_MODIFICATION_REQUEST = 52
    SESSION_MODIFICATION_RESPONSE = 53
    SESSION_DELETION_REQUEST = 54
    SESSION_DELETION_RESPONSE = 55


SESSION_MESSAGES = frozenset(range(50, 100))


class IeType(enum.IntEnum):
    CREATE_PDR = 1
    PDI = 2
    CREATE_FAR = 3
    FORWARDING_PARAMETERS = 4
    CREATED_PDR = 8
    UPDATE_PDR = 9
    UPDATE_FAR = 10
    UPDATE_FORWARDING_PARAMETERS = 11
    REMOVE_PDR = 15
    REMOVE_FAR = 16
    CAUSE = 19
    SOURCE_INTERFACE = 20
    F_TEID = 21
    NETWORK_INSTANCE = 22
    PRECEDENCE = 29
    DESTINATION_INTERFACE = 42
    APPLY_ACTION = 44
    PDR_ID = 56
    F_SEID = 57
    NODE_ID = 60
    OUTER_HEADER_CREATION = 84
    UE_IP_ADDRESS = 93
    OUTER_HEADER_REMOVAL = 95
    RECOVERY_TIME_STAMP = 96
    FAR_ID = 108
    QFI = 124


GROUPED = frozenset(
    {
        IeType.CREATE_PDR,
        IeType.PDI,
        IeType.CREATE_FAR,
        IeType.FORWARDING_PARAMETERS,
        IeType.CREATED_PDR,
        IeType.UPDATE_PDR,
        IeType.UPDATE_FAR,
        IeType.UPDATE_FORWARDING_PARAMETERS,
        IeType.REMOVE_PDR,
        IeType.REMOVE_FAR,
    }
)


class Cause(enum.IntEnum):
    REQUEST_ACCEPTED = 1
    REQUEST_REJECTED = 64
    SESSION_CONTEXT_NOT_FOUND = 65
    MANDATORY_IE_MISSING = 66
    CONDITIONAL_IE_MISSING = 67
    MANDATORY_IE_INCORRECT = 69
    NO_ESTABLISHED_ASSOCIATION = 72
    RULE_CREATION_FAILURE = 73


class Interface(enum.IntEnum):
    ACCESS = 0
    CORE = 1
    SGI_LAN = 2
    CP_FUNCTION = 3


class ApplyAction(enum.IntFlag):
    DROP = 0x01
    FORW = 0x02
    BUFF = 0x04
    NOCP = 0x08
    DUPL = 0x10


OHR_GTPU_UDP_IPV4 = 0
OHR_GTPU_UDP_IPV6 = 1


# ---------------------------------------------------------------------------
# TLV layer
# ---------------------------------------------------------------------------


@dataclass
class Ie:
    type: int
    value: bytes = b""
    children: list[Ie] | None = None

    @property
    def grouped(self) -> bool:
        return self.children is not None

    def encode(self) -> bytes:
        body = b"".join(c.encode() for c in self.children) if self.children is not None else self.value
        if len(body) > 0xFFFF:
            raise PfcpError(f"IE {self.type} value too long")
        return struct.pack("!HH", self.type, len(body)) + body

    def find(self, ie_type: int) -> Ie | None:
        return next(self.find_all(ie_type), None)

    def find_all(self, ie_type: int) -> Iterator[Ie]:
        return (c for c in (self.children or ()) if c.type == ie_type)


def group(ie_type: int, *children: Ie | None) -> Ie:
    return Ie(ie_type, children=[c for c in children if c is not None])


def decode_ies(data: bytes) -> list[Ie]:
    ies = []
    pos = 0
    while pos < len(data):
        if len(data) - pos < 4:
            raise TlvOverrun(f"truncated IE header at offset {pos}")
        ie_type, length = struct.unpack_from("!HH", data, pos)
        pos += 4
        if pos + length > len(data):
            raise TlvOverrun(f"IE {ie_type} claims {length} octets, {len(data) - pos} remain")
        value = bytes(data[pos : pos + length])
        pos += length
        if ie_type in GROUPED:
            ies.append(Ie(ie_type, children=decode_ies(value)))
        else:
            ies.append(Ie(ie_type, value))
    return ies


# ---------------------------------------------------------------------------
# Message layer
# ---------------------------------------------------------------------------


@dataclass
class PfcpMessage:
    message_type: int
    sequence: int
    ies: list[Ie] = field(default_factory=list)
    seid: int | None = None
    priority: int | None = None
    follow_on: bool = False

    def find(self, ie_type: int) -> Ie | None:
        return next(self.find_all(ie_type), None)

    def find_all(self, ie_type: int) -> Iterator[Ie]:
        return (ie for ie in self.ies if ie.type == ie_type)


def encode_pfcp(msg: PfcpMessage) -> bytes:
    if not 0 <= msg.sequence < 1 << 24:
        raise PfcpError(f"sequence {msg.sequence} does not fit 24 bits")
    body = b"".join(ie.encode() for ie in msg.ies)
    flags = (PFCP_VERSION << 5) | (int(msg.follow_on) << 2)
    tail = b"\x00" if msg.priority is None else bytes(((msg.priority & 0x0F) << 4,))
    if msg.priority is not None:
        flags |= 0x02
    seid = b""
    if msg.seid is not None:
        flags |= 0x01
        seid = struct.pack("!Q", msg.seid)
    rest = seid + msg.sequence.to_bytes(3, "big") + tail + body
    if len(rest) > 0xFFFF:
        raise PfcpError("PFCP message too long")
    return struct.pack("!BBH", flags, msg.message_type, len(rest)) + rest


def decode_pfcp(data: bytes) -> PfcpMessage:
    if len(data) < 8:
        raise TooShort(f"PFCP header needs 8 octets, got {len(data)}")
    flags, mtype, length = struct.unpack_from("!BBH", data)
    if flags >> 5 != PFCP_VERSION:
        raise BadVersion(f"PFCP version {flags >> 5}")
    if len(data) - 4 < length:
        raise TooShort(f"PFCP length {length} but {len(data) - 4} octets follow")
    if len(data) - 4 > length:
        raise TlvOverrun(f"{len(data) - 4 - length} stray octets after PFCP message")
    pos = 4
    seid = None
    if flags & 0x01:
        if length < 12:
            raise TooShort("PFCP header with SEID needs 16 octets")
        (seid,) = struct.unpack_from("!Q", data, pos)
        pos += 8
    elif length < 4:
        raise TooShort("PFCP header needs 8 octets")
    sequence = int.from_bytes(data[pos : pos + 3], "big")
    priority = data[pos + 3] >> 4 if flags & 0x02 else None
    pos += 4
    return PfcpMessage(
        message_type=mtype,
        sequence=sequence,
        ies=decode_ies(data[pos:]),
        seid=seid,
        priority=priority,
        follow_on=bool(flags & 0x04),
    )


# ---------------------------------------------------------------------------
# Scalar IE values
# ---------------------------------------------------------------------------


def _u(ie_type: int, value: int, size: int) -> Ie:
    return Ie(ie_type, value.to_bytes(size, "big"))


def _int(ie: Ie) -> int:
    if not ie.value:
        raise PfcpError(f"IE {ie.type} is empty")
    return int.from_bytes(ie.value, "big")


def cause_ie(cause: int) -> Ie:
    return _u(IeType.CAUSE, cause, 1)


def pdr_id_ie(pdr_id: int) -> Ie:
    return _u(IeType.PDR_ID, pdr_id, 2)


def far_id_ie(far_id: int) -> Ie:
    return _u(IeType.FAR_ID, far_id, 4)


def precedence_ie(value: int) -> Ie:
    return _u(IeType.PRECEDENCE, value, 4)


def source_interface_ie(iface: int) -> Ie:
    return _u(IeType.SOURCE_INTERFACE, iface & 0x0F, 1)


def destination_interface_ie(iface: int) -> Ie:
    return _u(IeType.DESTINATION_INTERFACE, iface & 0x0F, 1)


def apply_action_ie(action: int) -> Ie:
    return _u(IeType.APPLY_ACTION, action, 1)


def recovery_ie(ts: int) -> Ie:
    return _u(IeType.RECOVERY_TIME_STAMP, ts, 4)


def qfi_ie(qfi: int) -> Ie:
    return _u(IeType.QFI, qfi & 0x3F, 1)


def outer_header_removal_ie(desc: int = OHR_GTPU_UDP_IPV6) -> Ie:
    return _u(IeType.OUTER_HEADER_REMOVAL, desc, 1)


def int_value(ie: Ie) -> int:
    return _int(ie)


def interface_value(ie: Ie) -> int:
    return _int(ie) & 0x0F


def qfi_value(ie: Ie) -> int:
    return _int(ie) & 0x3F


def network_instance_ie(name: str) -> Ie:
    """Network Instance carried in DNS label form."""
    out = b""
    for label in name.split("."):
        raw = label.encode()
        if not 0 < len(raw) < 64:
            raise PfcpError(f"bad network instance label {label!r}")
        out += bytes((len(raw),)) + raw
    return Ie(IeType.NETWORK_INSTANCE, out)


def network_instance_value(ie: Ie) -> str:
    labels = []
    data = ie.value
    pos = 0
    while pos < len(data):
        n = data[pos]
        if n == 0 or pos + 1 + n > len(data):
            # not label-encoded: treat as a plain string
            return data.decode("utf-8", "replace")
        labels.append(data[pos + 1 : pos + 1 + n].decode("utf-8", "replace"))
        pos += 1 + n
    return ".".join(labels)


@dataclass(frozen=True)
class NodeId:
    value: IPv4Address | IPv6Address | str

    def to_ie(self) -> Ie:
        if isinstance(self.value, IPv4Address):
            return Ie(IeType.NODE_ID, b"\x00" + self.value.packed)
        if isinstance(self.value, IPv6Address):
            return Ie(IeType.NODE_ID, b"\x01" + self.value.packed)
        labels = b"".join(bytes((len(p),)) + p.encode() for p in self.value.split("."))
        return Ie(IeType.NODE_ID, b"\x02" + labels)

    @classmethod
    def from_ie(cls, ie: Ie) -> NodeId:
        if not ie.value:
            raise PfcpError("empty Node ID")
        kind, rest = ie.value[0] & 0x0F, ie.value[1:]
        if kind == 0 and len(rest) >= 4:
            return cls(IPv4Address(rest[:4]))
        if kind == 1 and len(rest) >= 16:
            return cls(IPv6Address(rest[:16]))
        if kind == 2:
            return cls(network_instance_value(Ie(IeType.NETWORK_INSTANCE, rest)))
        raise PfcpError(f"malformed Node ID (type {kind})")

    def __str__(self) -> str:
        return str(self.value)


@dataclass(frozen=True)
class FSeid:
    seid: int
    ipv4: IPv4Address | None = None
    ipv6: IPv6Address | None = None

    def to_ie(self) -> Ie:
        flags = (0x02 if self.ipv4 else 0) | (0x01 if self.ipv6 else 0)
        out = bytes((flags,)) + struct.pack("!Q", self.seid)
        if self.ipv4:
            out += self.ipv4.packed
        if self.ipv6:
            out += self.ipv6.packed
        return Ie(IeType.F_SEID, out)

    @classmethod
    def from_ie(cls, ie: Ie) -> FSeid:
        v = ie.value
        if len(v) < 9:
            raise PfcpError("F-SEID too short")
        flags = v[0]
        (seid,) = struct.unpack_from("!Q", v, 1)
        pos = 9
        ipv4 = ipv6 = None
        if flags & 0x02:
            ipv4 = IPv4Address(v[pos : pos + 4])
            pos += 4
        if flags & 0x01:
            ipv6 = IPv6Address(v[pos : pos + 16])
        return cls(seid, ipv4, ipv6)


@dataclass(frozen=True)
class FTeid:
    teid: int | None = None
    ipv4: IPv4Address | None = None
    ipv6: IPv6Address | None = None
    choose: bool = False
    choose_id: int | None = None

    def to_ie(self) -> Ie:
        flags = (
            (0x01 if self.ipv4 else 0)
            | (0x02 if self.ipv6 else 0)
            | (0x04 if self.choose else 0)
            | (0x08 if self.choose_id is not None else 0)
        )
        out = bytes((flags,))
        if not self.choose:
            out += struct.pack("!I", self.teid or 0)
            if self.ipv4:
                out += self.ipv4.packed
            if self.ipv6:
                out += self.ipv6.packed
        if self.choose_id is not None:
            out += bytes((self.choose_id,))
        return Ie(IeType.F_TEID, out)

    @classmethod
    def from_ie(cls, ie: Ie) -> FTeid:
        v = ie.value
        if not v:
            raise PfcpError("empty F-TEID")
        flags = v[0]
        pos = 1
        teid = ipv4 = ipv6 = None
        choose = bool(flags & 0x04)
        try:
            if not choose:
                (teid,) = struct.unpack_from("!I", v, pos)
                pos += 4
                if flags & 0x01:
                    ipv4 = IPv4Address(v[pos : pos + 4])
                    pos += 4
                if flags & 0x02:
                    ipv6 = IPv6Address(v[pos : pos + 16])
                    pos += 16
            choose_id = v[pos] if flags & 0x08 else None
        except (struct.error, ValueError, IndexError) as exc:
            raise PfcpError(f"malformed F-TEID: {exc}") from None
        return cls(teid, ipv4, ipv6, choose, choose_id)


@dataclass(frozen=True)
class UeIpAddress:
    ipv4: IPv4Address | None = None
    ipv6: IPv6Address | None = None
    destination: bool = False  # S/D flag: address is a destination
    prefix_length: int | None = None  # IP6PL

    def to_ie(self) -> Ie:
        flags = (
            (0x01 if self.ipv6 else 0)
            | (0x02 if self.ipv4 else 0)
            | (0x04 if self.destination else 0)
            | (0x40 if self.prefix_length is not None else 0)
        )
        out = bytes((flags,))
        if self.ipv4:
            out += self.ipv4.packed
        if self.ipv6:
            out += self.ipv6.packed
        if self.prefix_length is not None:
            out += bytes((self.prefix_length,))
        return Ie(IeType.UE_IP_ADDRESS, out)

    @classmethod
    def from_ie(cls, ie: Ie) -> UeIpAddress:
        v = ie.value
        if not v:
            raise PfcpError("empty UE IP Address")
        flags = v[0]
        pos = 1
        ipv4 = ipv6 = None
        try:
            if flags & 0x02:
                ipv4 = IPv4Address(v[pos : pos + 4])
                pos += 4
            if flags & 0x01:
                ipv6 = IPv6Address(v[pos : pos + 16])
                pos += 16
            if flags & 0x08:  # IPv6D: delegation bits octet, not interpreted
                pos += 1
            plen = v[pos] if flags & 0x40 else None
        except (ValueError, IndexError) as exc:
            raise PfcpError(f"malformed UE IP Address: {exc}") from None
        return cls(ipv4, ipv6, bool(flags & 0x04), plen)


@dataclass(frozen=True)
class OuterHeaderCreation:
    teid: int
    ipv6: IPv6Address | None = None
    ipv4: IPv4Address | None = None

    GTPU_UDP_IPV4 = 0x0100
    GTPU_UDP_IPV6 = 0x0200

    def to_ie(self) -> Ie:
        desc = (self.GTPU_UDP_IPV6 if self.ipv6 else 0) | (self.GTPU_UDP_IPV4 if self.ipv4 else 0)
        out = struct.pack("!HI", desc, self.teid)
        if self.ipv4:
            out += self.ipv4.packed
        if self.ipv6:
            out += self.ipv6.packed
        return Ie(IeType.OUTER_HEADER_CREATION, out)

    @classmethod
    def from_ie(cls, ie: Ie) -> OuterHeaderCreation:
        v = ie.value
        if len(v) < 2:
            raise PfcpError("Outer Header Creation too short")
        (desc,) = struct.unpack_from("!H", v)
        if not desc & (cls.GTPU_UDP_IPV4 | cls.GTPU_UDP_IPV6):
            raise PfcpError(f"Outer Header Creation 0x{desc:04x} is not GTP-U")
        try:
            (teid,) = struct.unpack_from("!I", v, 2)
            pos = 6
            ipv4 = ipv6 = None
            if desc & cls.GTPU_UDP_IPV4:
                ipv4 = IPv4Address(v[pos : pos + 4])
                pos += 4
            if desc & cls.GTPU_UDP_IPV6:
                ipv6 = IPv6Address(v[pos : pos + 16])
        except (struct.error, ValueError) as exc:
            raise PfcpError(f"malformed Outer Header Creation: {exc}") from None
        return cls(teid, ipv6, ipv4)


def recovery_value(ie: Ie) -> int:
    return _int(ie)


def iter_ies(ies: Iterable[Ie]) -> Iterator[Ie]:
    """Depth-first walk over IEs and their grouped children."""
    for ie in ies:
        yield ie
        if ie.children:
            yield from iter_ies(ie.children)
