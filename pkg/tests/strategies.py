"""Hypothesis strategies shared by the codec and rule tests."""

from ipaddress import IPv6Address

from hypothesis import strategies as st

from srv6edge import wire

u8 = st.integers(0, 0xFF)
u16 = st.integers(0, 0xFFFF)
u32 = st.integers(0, 0xFFFFFFFF)
qfis = st.integers(0, 63)
v6 = st.integers(0, (1 << 128) - 1).map(IPv6Address)
small_bytes = st.binary(max_size=64)


@st.composite
def ipv6_headers(draw, next_header=None):
    return wire.Ipv6Header(
        src=draw(v6),
        dst=draw(v6),
        next_header=draw(u8) if next_header is None else next_header,
        hop_limit=draw(u8),
        traffic_class=draw(u8),
        flow_label=draw(st.integers(0, (1 << 20) - 1)),
    )


@st.composite
def srhs(draw, min_segments=1, max_segments=8):
    segs = tuple(draw(st.lists(v6, min_size=min_segments, max_size=max_segments)))
    return wire.SegmentRoutingHeader(
        next_header=draw(u8),
        segments_left=draw(st.integers(0, len(segs))),
        segments=segs,
        flags=draw(u8),
        tag=draw(u16),
    )


def _padded_body(n_units):
    return st.binary(min_size=4 * n_units - 2, max_size=4 * n_units - 2)


psc = st.builds(
    wire.PduSessionContainer,
    pdu_type=st.integers(0, 1),
    qfi=qfis,
    flags=st.integers(0, 63),
    extra=st.sampled_from([b"", b"\x00" * 4, b"\xaa\xbb\xcc\xdd"]),
)
raw_ext = st.builds(
    wire.RawExtension,
    ext_type=st.sampled_from([0x01, 0x02, 0x40, 0x81, 0x82, 0xC0]),
    body=st.integers(1, 3).flatmap(_padded_body),
)


@st.composite
def gtpu_headers(draw):
    mtype = draw(st.sampled_from(sorted(wire.GTPU_MESSAGE_TYPES)))
    exts = tuple(draw(st.lists(st.one_of(psc, raw_ext), max_size=3)))
    return wire.GtpuHeader(
        teid=draw(u32),
        message_type=mtype,
        sequence=draw(st.none() | u16),
        npdu=draw(st.none() | u8),
        extensions=exts,
    )
