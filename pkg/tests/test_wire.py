import struct
from dataclasses import replace
from ipaddress import IPv6Address

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scapy.all import Raw
from scapy.contrib.gtp import GTP_U_Header, GTPPDUSessionContainer
from scapy.layers.inet import UDP
from scapy.layers.inet6 import IPv6, IPv6ExtHdrSegmentRouting, in6_chksum

from srv6edge import wire
from strategies import gtpu_headers, ipv6_headers, small_bytes, srhs, v6

A = IPv6Address("2001:db8::a")
B = IPv6Address("2001:db8::b")
ZERO = IPv6Address("::")


def ref_checksum(src, dst, segment):
    """Independent RFC 1071 checksum: big-integer folding instead of word sums."""
    data = src.packed + dst.packed + len(segment).to_bytes(4, "big") + b"\x00\x00\x00\x11"
    data += segment[:6] + b"\x00\x00" + segment[8:]
    if len(data) % 2:
        data += b"\x00"
    total = int.from_bytes(data, "big")
    acc = 0
    while total:
        acc += total & 0xFFFF
        total >>= 16
    while acc > 0xFFFF:
        acc = (acc & 0xFFFF) + (acc >> 16)
    out = (~acc) & 0xFFFF
    return out or 0xFFFF


class TestIpv6:
    def test_no_next_header_zero_case(self):
        raw = bytes([0x60, 0, 0, 0, 0, 0, 59, 64]) + bytes(32)
        header, payload = wire.parse_ipv6(raw)
        assert header.next_header == wire.IPPROTO_NONE
        assert header.src == header.dst == ZERO
        assert payload == b""

    def test_empty_payload_serializes_to_40_octets(self):
        out = wire.serialize_ipv6(wire.Ipv6Header(A, B, 59), b"")
        assert len(out) == 40
        assert out[0] == 0x60

    @given(ipv6_headers(), small_bytes)
    def test_round_trip(self, header, payload):
        raw = wire.serialize_ipv6(header, payload)
        parsed, rest = wire.parse_ipv6(raw)
        assert parsed == header
        assert parsed.payload_length == len(payload)
        assert rest == payload
        assert wire.serialize_ipv6(parsed, rest) == raw

    def test_matches_reference_dissector(self):
        header = wire.Ipv6Header(A, B, 17, hop_limit=33, traffic_class=0xB8, flow_label=0x12345)
        raw = wire.serialize_ipv6(header, b"\x01\x02\x03")
        ref = IPv6(raw)
        assert (ref.version, ref.tc, ref.fl, ref.plen, ref.nh, ref.hlim) == (6, 0xB8, 0x12345, 3, 17, 33)
        assert (ref.src, ref.dst) == (str(A), str(B))
        built = IPv6(src=str(A), dst=str(B), nh=17, hlim=33, tc=0xB8, fl=0x12345) / Raw(b"\x01\x02\x03")
        assert bytes(built) == raw

    def test_uplink_packet_fields_match_dissector(self):
        inner = wire.build_inner_ipv6_udp(A, B, b"hello")
        gtp = wire.serialize_gtpu(wire.gpdu_header(100, 9), inner)
        seg = wire.build_udp(A, B, 2152, 2152, gtp)
        raw = wire.serialize_ipv6(wire.Ipv6Header(A, B, 17), seg)
        ours, _ = wire.parse_ipv6(raw)
        ref = IPv6(raw)
        assert ref.plen == ours.payload_length == len(seg)
        assert ref[UDP].chksum == struct.unpack_from("!H", seg, 6)[0]
        assert ref[GTP_U_Header].teid == 100

    def test_too_short(self):
        with pytest.raises(wire.TooShort):
            wire.parse_ipv6(bytes(39))

    def test_bad_version(self):
        raw = bytearray(wire.serialize_ipv6(wire.Ipv6Header(A, B, 59), b""))
        raw[0] = 0x40
        with pytest.raises(wire.BadVersion):
            wire.parse_ipv6(bytes(raw))

    @pytest.mark.parametrize("extra", [-1, 1])
    def test_length_mismatch_is_never_a_partial_success(self, extra):
        raw = wire.serialize_ipv6(wire.Ipv6Header(A, B, 59), b"abcd")
        raw = raw[:-1] if extra < 0 else raw + b"x"
        with pytest.raises(wire.LengthMismatch):
            wire.parse_ipv6(raw)

    def test_oversize(self):
        with pytest.raises(wire.Oversize):
            wire.serialize_ipv6(wire.Ipv6Header(A, B, 59), bytes(65536))


class TestSrh:
    def test_single_segment_against_dissector(self):
        srh = wire.SegmentRoutingHeader(41, 1, (A,))
        raw = wire.serialize_srh(srh)
        ref = IPv6ExtHdrSegmentRouting(raw)
        assert (ref.len, ref.type, ref.segleft, ref.lastentry) == (2, 4, 1, 0)
        assert ref.addresses == [str(A)]
        parsed, rest = wire.parse_srh(raw)
        assert parsed == srh and rest == b""

    def test_segments_left_zero_differs_only_in_that_field(self):
        one = wire.serialize_srh(wire.SegmentRoutingHeader(41, 1, (A,)))
        zero = wire.serialize_srh(wire.SegmentRoutingHeader(41, 0, (A,)))
        assert [i for i in range(len(one)) if one[i] != zero[i]] == [3]
        assert wire.parse_srh(zero)[0].segments == (A,)

    def test_serialize_matches_dissector_bytes(self):
        segs = [A, B, IPv6Address("2001:db8::c")]
        ours = wire.serialize_srh(wire.SegmentRoutingHeader(59, 2, tuple(segs), tag=7))
        ref = IPv6ExtHdrSegmentRouting(nh=59, segleft=2, tag=7, addresses=[str(s) for s in segs])
        assert bytes(ref) == ours

    def test_one_segment_is_24_octets(self):
        assert len(wire.serialize_srh(wire.SegmentRoutingHeader(41, 0, (IPv6Address("::1"),)))) == 24

    def test_three_segments_hdr_ext_len(self):
        assert wire.serialize_srh(wire.SegmentRoutingHeader(41, 0, (A, B, A)))[1] == 6

    @given(srhs(), small_bytes)
    def test_round_trip(self, srh, tail):
        raw = wire.serialize_srh(srh)
        assert len(raw) == 8 + 16 * len(srh.segments)
        parsed, rest = wire.parse_srh(raw + tail)
        assert parsed == srh and rest == tail
        assert parsed.last_entry == len(srh.segments) - 1
        assert parsed.hdr_ext_len == raw[1]

    def test_wrong_routing_type(self):
        raw = bytearray(wire.serialize_srh(wire.SegmentRoutingHeader(41, 0, (A,))))
        raw[2] = 0
        with pytest.raises(wire.WrongRoutingType):
            wire.parse_srh(bytes(raw))

    def test_length_inconsistent(self):
        raw = bytearray(wire.serialize_srh(wire.SegmentRoutingHeader(41, 0, (A,))))
        raw[1] = 4
        with pytest.raises(wire.LengthInconsistent):
            wire.parse_srh(bytes(raw))

    def test_segments_left_beyond_list(self):
        raw = bytearray(wire.serialize_srh(wire.SegmentRoutingHeader(41, 0, (A,))))
        raw[3] = 2
        with pytest.raises(wire.LengthInconsistent):
            wire.parse_srh(bytes(raw))

    def test_truncated_segment_list(self):
        raw = wire.serialize_srh(wire.SegmentRoutingHeader(41, 0, (A, B)))
        with pytest.raises(wire.TooShort):
            wire.parse_srh(raw[:-1])
        with pytest.raises(wire.TooShort):
            wire.parse_srh(raw[:7])

    def test_empty_segment_list(self):
        with pytest.raises(wire.EmptySegmentList):
            wire.serialize_srh(wire.SegmentRoutingHeader(41, 0, ()))


class TestUdpChecksum:
    def test_zero_addresses_minimal_header(self):
        segment = bytes(8)
        # only the pseudo-header contributes: length (8) + next header (17)
        assert wire.compute_udp_checksum(ZERO, ZERO, segment) == (~(8 + 17)) & 0xFFFF == 0xFFE6
        assert ref_checksum(ZERO, ZERO, segment) == 0xFFE6

    def test_length_field_counts_twice(self):
        segment = bytes([0, 0, 0, 0, 0, 8, 0, 0])
        assert wire.compute_udp_checksum(ZERO, ZERO, segment) == (~(8 + 17 + 8)) & 0xFFFF
        assert ref_checksum(ZERO, ZERO, segment) == 0xFFDE

    @given(v6, v6, st.integers(0, 0xFFFF), st.integers(0, 0xFFFF), st.binary(max_size=200))
    def test_matches_independent_reference(self, src, dst, sport, dport, payload):
        seg = wire.build_udp(src, dst, sport, dport, payload)
        assert struct.unpack_from("!H", seg, 6)[0] == ref_checksum(src, dst, seg)

    @given(v6, v6, st.binary(min_size=1, max_size=64), st.data())
    def test_flipping_a_payload_bit_changes_checksum(self, src, dst, payload, data):
        seg = bytearray(wire.build_udp(src, dst, 1, 2, payload))
        before = wire.compute_udp_checksum(src, dst, bytes(seg))
        bit = data.draw(st.integers(0, 8 * len(payload) - 1))
        seg[8 + bit // 8] ^= 1 << (bit % 8)
        assert wire.compute_udp_checksum(src, dst, bytes(seg)) != before

    def test_dissector_agrees_and_verify_accepts(self):
        seg = wire.build_udp(A, B, 2152, 2152, b"payload!")
        pkt = IPv6(src=str(A), dst=str(B)) / UDP(sport=2152, dport=2152) / Raw(b"payload!")
        built = bytes(pkt)
        assert built[40:] == seg
        assert in6_chksum(17, IPv6(built), built[40:46] + b"\x00\x00" + built[48:]) == struct.unpack_from("!H", seg, 6)[0]
        header, payload = wire.parse_udp(A, B, built[40:])
        assert (header.src_port, payload) == (2152, b"payload!")

    def test_routing_header_uses_final_segment(self):
        final = IPv6Address("2001:db8::f")
        pkt = (
            IPv6(src=str(A), dst=str(B))
            / IPv6ExtHdrSegmentRouting(addresses=[str(final), str(B)], segleft=1)
            / UDP(sport=5, dport=6)
            / Raw(b"routed")
        )
        built = bytes(pkt)
        d = wire.dissect(built)
        assert not d.errors and d.udp_payload == b"routed"
        ours = struct.unpack_from("!H", wire.build_udp(A, final, 5, 6, b"routed"), 6)[0]
        assert d.udp.checksum == IPv6(built)[UDP].chksum == ours
        # the current destination is not what the checksum covers
        with pytest.raises(wire.BadChecksum):
            wire.parse_udp(A, B, built[40 + 40 :])

    def test_zero_checksum_rejected(self):
        seg = bytearray(wire.build_udp(A, B, 1, 2, b"x"))
        seg[6:8] = b"\x00\x00"
        with pytest.raises(wire.BadChecksum):
            wire.parse_udp(A, B, bytes(seg))

    def test_wrong_checksum_rejected(self):
        seg = bytearray(wire.build_udp(A, B, 1, 2, b"x"))
        seg[-1] ^= 0xFF
        with pytest.raises(wire.BadChecksum):
            wire.parse_udp(A, B, bytes(seg))

    def test_too_short(self):
        with pytest.raises(wire.TooShort):
            wire.compute_udp_checksum(A, B, bytes(7))


class TestGtpu:
    def test_minimal_gpdu(self):
        raw = bytes([0x30, 0xFF, 0x00, 0x04, 0, 0, 0, 1]) + b"abcd"
        header, inner = wire.parse_gtpu(raw)
        assert (header.message_type, header.teid, inner) == (255, 1, b"abcd")
        ref = GTP_U_Header(raw)
        assert (ref.gtp_type, ref.teid, ref.length) == (255, 1, 4)
        assert wire.serialize_gtpu(header, inner) == raw
        assert bytes(GTP_U_Header(teid=1, gtp_type=255) / Raw(b"abcd")) == raw

    def test_pdu_session_container_uplink(self):
        raw = wire.serialize_gtpu(wire.gpdu_header(7, qfi=9, pdu_type=wire.PDU_TYPE_UPLINK), b"xy")
        ref = GTP_U_Header(raw)
        assert ref.E == 1 and ref.next_ex == 0x85
        assert ref[GTPPDUSessionContainer].type == 1
        assert ref[GTPPDUSessionContainer].QFI == 9
        expected = GTP_U_Header(teid=7, E=1, next_ex=0x85) / GTPPDUSessionContainer(type=1, QFI=9) / Raw(b"xy")
        assert bytes(expected) == raw
        header, inner = wire.parse_gtpu(bytes(expected))
        assert header.pdu_session == wire.PduSessionContainer(1, 9)
        assert header.qfi == 9 and inner == b"xy"

    def test_downlink_container_against_dissector(self):
        raw = wire.serialize_gtpu(wire.gpdu_header(1, qfi=10, pdu_type=wire.PDU_TYPE_DOWNLINK), b"")
        ref = GTP_U_Header(raw)
        assert ref[GTPPDUSessionContainer].type == 0
        assert ref[GTPPDUSessionContainer].QFI == 10

    @given(gtpu_headers(), small_bytes)
    def test_round_trip(self, header, inner):
        raw = wire.serialize_gtpu(header, inner)
        parsed, rest = wire.parse_gtpu(raw)
        assert parsed == header and rest == inner
        assert parsed.length == len(raw) - 8
        assert wire.serialize_gtpu(parsed, rest) == raw

    def test_optional_block_zero_filled_when_only_sequence(self):
        raw = wire.serialize_gtpu(wire.GtpuHeader(5, sequence=0x1234), b"")
        assert raw[0] == 0x32
        assert raw[8:] == b"\x12\x34\x00\x00"

    def test_unknown_extension_preserved(self):
        ext = wire.RawExtension(0x40, b"\x01\x02")
        header = wire.GtpuHeader(9, extensions=(ext, wire.PduSessionContainer(1, 3)))
        raw = wire.serialize_gtpu(header, b"z")
        parsed, _ = wire.parse_gtpu(raw)
        assert parsed.extensions[0] == ext
        assert wire.serialize_gtpu(parsed, b"z") == raw

    def test_too_short(self):
        with pytest.raises(wire.TooShort):
            wire.parse_gtpu(bytes([0x30, 0xFF, 0, 0]))

    def test_bad_version(self):
        with pytest.raises(wire.BadVersion):
            wire.parse_gtpu(bytes([0x50, 0xFF, 0, 0, 0, 0, 0, 1]))

    @pytest.mark.parametrize("mtype", [0, 3, 26, 31, 254])
    def test_unsupported_message_type(self, mtype):
        with pytest.raises(wire.UnsupportedMessageType):
            wire.parse_gtpu(bytes([0x30, mtype, 0, 0, 0, 0, 0, 1]))

    def test_echo_types_accepted(self):
        for mtype in (1, 2):
            header, _ = wire.parse_gtpu(bytes([0x30, mtype, 0, 0, 0, 0, 0, 0]))
            assert header.message_type == mtype

    def test_e_flag_without_extension(self):
        raw = bytes([0x34, 0xFF, 0, 4, 0, 0, 0, 1, 0, 0, 0, 0])
        with pytest.raises(wire.BadExtensionChain):
            wire.parse_gtpu(raw)

    def test_extension_overrun(self):
        raw = bytes([0x34, 0xFF, 0, 8, 0, 0, 0, 1, 0, 0, 0, 0x85, 2, 0x10, 0x09, 0])
        with pytest.raises(wire.BadExtensionChain):
            wire.parse_gtpu(raw)

    def test_length_mismatch(self):
        with pytest.raises(wire.LengthMismatch):
            wire.parse_gtpu(bytes([0x30, 0xFF, 0, 5, 0, 0, 0, 1]) + b"abcd")

    def test_oversize(self):
        with pytest.raises(wire.Oversize):
            wire.serialize_gtpu(wire.gpdu_header(1, 1), bytes(0xFFFF))

    def test_qfi_bound(self):
        with pytest.raises(ValueError):
            wire.PduSessionContainer(1, 64)


class TestInnerAndDissect:
    def test_inner_version_from_first_nibble(self):
        pdu = wire.build_inner_ipv6_udp(A, B, b"q")
        inner = wire.InnerPdu(pdu)
        assert (inner.ip_version, inner.src, inner.dst) == (6, A, B)

    def test_rejects_non_ip(self):
        with pytest.raises(wire.CodecError):
            wire.InnerPdu(b"\x10abc")

    def test_dissect_layers(self):
        inner = wire.build_inner_ipv6_udp(A, B, b"hi")
        gtp = wire.serialize_gtpu(wire.gpdu_header(3, 4), inner)
        raw = wire.serialize_ipv6(wire.Ipv6Header(B, A, 17), wire.build_udp(B, A, 2152, 2152, gtp))
        d = wire.dissect(raw)
        assert d.gtpu.teid == 3 and d.gtpu.qfi == 4
        assert d.inner.data == inner
        assert not d.errors

    def test_dissect_records_inner_errors(self):
        raw = wire.serialize_ipv6(wire.Ipv6Header(A, B, 17), b"\x00\x01\x02")
        assert wire.dissect(raw).errors

    @settings(max_examples=50)
    @given(ipv6_headers(next_header=59))
    def test_hop_limit_and_tc_survive(self, header):
        parsed, _ = wire.parse_ipv6(wire.serialize_ipv6(header, b""))
        assert replace(parsed, payload_length=0) == header
