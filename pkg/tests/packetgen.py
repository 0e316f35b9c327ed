"""Seeded random packets for codec round-trip runs."""

import random
from ipaddress import IPv6Address

from srv6edge import wire


def _v6(rng):
    return IPv6Address(rng.getrandbits(128))


def random_inner(rng: random.Random) -> bytes:
    if rng.random() < 0.7:
        payload = rng.randbytes(rng.randrange(0, 256))
        return wire.build_inner_ipv6_udp(_v6(rng), _v6(rng), payload, rng.getrandbits(16), rng.getrandbits(16))
    # opaque IPv4 datagram: only the version nibble is interpreted
    return bytes([0x45]) + rng.randbytes(rng.randrange(19, 200))


def random_extension(rng: random.Random):
    if rng.random() < 0.7:
        return wire.PduSessionContainer(
            rng.randrange(2), rng.randrange(64), rng.randrange(64), rng.choice([b"", rng.randbytes(4)])
        )
    return wire.RawExtension(rng.choice([0x01, 0x02, 0x40, 0x81, 0x82, 0xC0]), rng.randbytes(4 * rng.randrange(1, 4) - 2))


def random_gtpu(rng: random.Random) -> wire.GtpuHeader:
    return wire.GtpuHeader(
        teid=rng.getrandbits(32),
        sequence=rng.choice([None, rng.getrandbits(16)]),
        npdu=rng.choice([None, rng.getrandbits(8)]),
        extensions=tuple(random_extension(rng) for _ in range(rng.choice([0, 1, 1, 1, 2]))),
    )


def random_packet(rng: random.Random) -> bytes:
    """IPv6 [/ SRH] / (UDP / GTP-U / inner | inner), every field drawn at random."""
    src, dst = _v6(rng), _v6(rng)
    inner = random_inner(rng)
    segs = tuple(_v6(rng) for _ in range(rng.randrange(1, 7))) if rng.random() < 0.6 else ()
    # with a routing header the checksum covers the final segment, not the current destination
    final = segs[0] if segs else dst
    if rng.random() < 0.6:
        body = wire.serialize_gtpu(random_gtpu(rng), inner)
        ports = [wire.GTPU_PORT, rng.choice([wire.GTPU_PORT, rng.randrange(1024, 65536)])]
        rng.shuffle(ports)
        payload = wire.build_udp(src, final, ports[0], ports[1], body)
        nxt = wire.IPPROTO_UDP
    else:
        payload = inner
        nxt = wire.IPPROTO_IPV6 if inner[0] >> 4 == 6 else wire.IPPROTO_IPIP
    if segs:
        srh = wire.SegmentRoutingHeader(nxt, rng.randrange(len(segs) + 1), segs, rng.getrandbits(8), rng.getrandbits(16))
        payload = wire.serialize_srh(srh) + payload
        nxt = wire.IPPROTO_ROUTING
    header = wire.Ipv6Header(
        src, dst, nxt, hop_limit=rng.getrandbits(8), traffic_class=rng.getrandbits(8), flow_label=rng.getrandbits(20)
    )
    return wire.serialize_ipv6(header, payload)


def rebuild(d: wire.Dissection) -> bytes:
    """Serialize a dissection back to bytes from its decoded layers alone."""
    final = wire.pseudo_header_dst(d.ipv6, d.srh)
    if d.gtpu is not None:
        body = wire.serialize_gtpu(d.gtpu, d.inner.data if d.inner else b"")
        payload = wire.build_udp(d.ipv6.src, final, d.udp.src_port, d.udp.dst_port, body)
    elif d.udp is not None:
        payload = wire.build_udp(d.ipv6.src, final, d.udp.src_port, d.udp.dst_port, d.udp_payload)
    else:
        payload = d.inner.data
    if d.srh is not None:
        payload = wire.serialize_srh(d.srh) + payload
    return wire.serialize_ipv6(d.ipv6, payload)
