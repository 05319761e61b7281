import struct

import numpy as np
import pytest

from hstf import capture
from hstf.capture import (MalformedHeader, RawPacket, TcpSegment, TruncatedHeader,
                          UnsupportedLinkType, UnsupportedMagic, decode_segment,
                          read_capture, reassemble, write_capture)


def oracle_pcap_bytes(packets, endian="<"):
    """Hand-written pcap serializer, independent of the library writer."""
    out = struct.pack(endian + "IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)
    for ts, data in packets:
        sec = int(ts)
        usec = int(round((ts - sec) * 1e6))
        out += struct.pack(endian + "IIII", sec, usec, len(data), len(data))
        out += data
    return out


def build_frame(src_ip="192.168.1.2", dst_ip="10.0.0.1", sport=49152, dport=80,
                seq=1000, payload=b"HELLO", flags=0x18, ttl=64, total_len=None):
    """Hand-assembled Ethernet+IPv4+TCP frame with standard header offsets."""
    eth = bytes(6) + bytes(6) + b"\x08\x00"
    tcp = struct.pack("!HHIIHHHH", sport, dport, seq, 0, (5 << 12) | flags,
                      8192, 0, 0) + payload
    if total_len is None:
        total_len = 20 + len(tcp)
    ip = struct.pack("!BBHHHBBH", 0x45, 0, total_len, 1, 0, ttl, 6, 0)
    ip += bytes(int(p) for p in src_ip.split("."))
    ip += bytes(int(p) for p in dst_ip.split("."))
    return eth + ip + tcp


class TestReadCapture:
    def test_empty_capture_yields_nothing(self, tmp_path):
        path = tmp_path / "empty.pcap"
        path.write_bytes(oracle_pcap_bytes([]))
        assert list(read_capture(path)) == []

    def test_roundtrip_against_hand_written_oracle(self, tmp_path):
        frames = [(100.000001, b"\x01\x02"), (100.5, b"abcd"), (200.25, b"\x00" * 60)]
        path = tmp_path / "three.pcap"
        path.write_bytes(oracle_pcap_bytes(frames))
        packets = list(read_capture(path))
        assert len(packets) == 3
        for (ts, data), pkt in zip(frames, packets):
            assert pkt.captured_bytes == data
            assert pkt.original_length == len(data)
            assert pkt.timestamp == pytest.approx(ts, abs=1e-6)

    def test_byte_order_symmetry(self, tmp_path):
        frames = [(1.0, b"xy"), (2.0, b"z" * 10)]
        le, be = tmp_path / "le.pcap", tmp_path / "be.pcap"
        le.write_bytes(oracle_pcap_bytes(frames, "<"))
        be.write_bytes(oracle_pcap_bytes(frames, ">"))
        assert list(read_capture(le)) == list(read_capture(be))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.pcap"
        path.write_bytes(b"\x00" * 24)
        with pytest.raises(UnsupportedMagic):
            list(read_capture(path))

    def test_truncated_global_header(self, tmp_path):
        path = tmp_path / "short.pcap"
        path.write_bytes(oracle_pcap_bytes([])[:10])
        with pytest.raises(TruncatedHeader):
            list(read_capture(path))

    def test_truncated_record_header(self, tmp_path):
        path = tmp_path / "rec.pcap"
        path.write_bytes(oracle_pcap_bytes([]) + b"\x00" * 7)
        with pytest.raises(TruncatedHeader):
            list(read_capture(path))

    def test_truncated_record_body(self, tmp_path):
        blob = oracle_pcap_bytes([(1.0, b"abcdef")])
        path = tmp_path / "body.pcap"
        path.write_bytes(blob[:-3])
        with pytest.raises(TruncatedHeader):
            list(read_capture(path))

    def test_non_ethernet_linktype(self, tmp_path):
        header = struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 101)
        path = tmp_path / "raw.pcap"
        path.write_bytes(header)
        with pytest.raises(UnsupportedLinkType):
            list(read_capture(path))

    def test_library_writer_round_trip(self, tmp_path):
        packets = [RawPacket(5.25, b"\xde\xad\xbe\xef", 4),
                   RawPacket(6.0, b"\x01" * 80, 80)]
        path = tmp_path / "w.pcap"
        write_capture(path, packets)
        assert list(read_capture(path)) == packets

    def test_writer_big_endian_matches(self, tmp_path):
        packets = [RawPacket(1.5, b"pq", 2)]
        a, b = tmp_path / "a.pcap", tmp_path / "b.pcap"
        write_capture(a, packets, "<")
        write_capture(b, packets, ">")
        assert list(read_capture(a)) == list(read_capture(b))


class TestDecodeSegment:
    def test_arp_is_skipped(self):
        frame = bytes(12) + b"\x08\x06" + bytes(28)
        assert decode_segment(RawPacket(0.0, frame, len(frame))) is None

    def test_ipv6_is_skipped(self):
        frame = bytes(12) + b"\x86\xdd" + bytes(40)
        assert decode_segment(RawPacket(0.0, frame, len(frame))) is None

    def test_udp_is_skipped(self):
        frame = bytearray(build_frame())
        frame[14 + 9] = 17  # protocol byte at RFC 791 offset 9 of the IP header
        assert decode_segment(RawPacket(0.0, bytes(frame), len(frame))) is None

    def test_hand_assembled_frame_fields(self):
        frame = build_frame(ttl=64, sport=49152, dport=80, seq=1000,
                            payload=b"HELLO")
        seg = decode_segment(RawPacket(12.5, frame, len(frame)))
        assert seg == TcpSegment(src_ip="192.168.1.2", dst_ip="10.0.0.1",
                                 src_port=49152, dst_port=80, seq=1000,
                                 payload=b"HELLO", syn=False, fin=False,
                                 rst=False, ack=True, ip_ttl=64, timestamp=12.5)

    def test_flag_decoding(self):
        for flags, attr in ((0x02, "syn"), (0x01, "fin"), (0x04, "rst"), (0x10, "ack")):
            frame = build_frame(flags=flags, payload=b"")
            seg = decode_segment(RawPacket(0.0, frame, len(frame)))
            assert getattr(seg, attr) is True

    def test_total_length_beyond_capture_is_malformed(self):
        frame = build_frame(total_len=2000)
        with pytest.raises(MalformedHeader):
            decode_segment(RawPacket(0.0, frame, len(frame)))

    def test_short_tcp_header_is_malformed(self):
        frame = build_frame(payload=b"")[: 14 + 20 + 10]
        # shrink the IP total length to match the truncated TCP header
        frame = bytearray(frame)
        frame[14 + 2:14 + 4] = struct.pack("!H", 30)
        with pytest.raises(MalformedHeader):
            decode_segment(RawPacket(0.0, bytes(frame), len(frame)))


def seg(seq, payload, src="1.1.1.1", dst="2.2.2.2", sport=40000, dport=80,
        ts=0.0, ttl=64, **flags):
    return TcpSegment(src_ip=src, dst_ip=dst, src_port=sport, dst_port=dport,
                      seq=seq, payload=payload, timestamp=ts, ip_ttl=ttl, **flags)


def rseg(seq, payload, ts=0.0, **flags):
    return TcpSegment(src_ip="2.2.2.2", dst_ip="1.1.1.1", src_port=80,
                      dst_port=40000, seq=seq, payload=payload, timestamp=ts,
                      ip_ttl=54, **flags)


class TestReassemble:
    def test_in_order_concatenation(self):
        pairs = list(reassemble([seg(100, b"abc"), seg(103, b"def")]))
        assert len(pairs) == 1
        assert pairs[0].client_to_server.data == b"abcdef"
        assert not pairs[0].lossy

    def test_swapped_arrival_matches_in_order(self):
        a = list(reassemble([seg(100, b"abc"), seg(103, b"def")]))[0]
        b = list(reassemble([seg(103, b"def"), seg(100, b"abc")]))[0]
        assert a.client_to_server.data == b.client_to_server.data
        assert a.client_to_server.lossy == b.client_to_server.lossy

    def test_exact_duplicate_dropped(self):
        pair = list(reassemble([seg(100, b"abc"), seg(100, b"abc"),
                                seg(103, b"xy")]))[0]
        assert pair.client_to_server.data == b"abcxy"
        assert pair.client_to_server.payload_segments == 2

    def test_overlap_first_copy_wins(self):
        pair = list(reassemble([seg(100, b"AAAA"), seg(102, b"bbbb")]))[0]
        assert pair.client_to_server.data == b"AAAAbb"

    def test_gap_marks_lossy(self):
        pair = list(reassemble([seg(100, b"ab"), seg(110, b"cd")]))[0]
        assert pair.client_to_server.lossy
        assert pair.client_to_server.data == b"abcd"  # retained bytes, compacted

    def test_reorder_invariance_property(self, rng):
        chunks = [bytes([65 + i]) * int(rng.integers(1, 9)) for i in range(8)]
        seqs = np.cumsum([0] + [len(c) for c in chunks[:-1]]) + 5000
        base = [seg(int(s), c, ts=float(i)) for i, (s, c) in enumerate(zip(seqs, chunks))]
        expected = b"".join(chunks)
        for _ in range(100):
            order = rng.permutation(len(base))
            pair = list(reassemble([base[i] for i in order]))[0]
            assert pair.client_to_server.data == expected
            assert not pair.client_to_server.lossy

    def test_direction_split_and_roles(self):
        segs = [seg(1, b"", syn=True), rseg(7, b"", syn=True, ack=True),
                seg(2, b"req"), rseg(8, b"resp")]
        pair = list(reassemble(segs))[0]
        assert pair.client_ip == "1.1.1.1" and pair.server_port == 80
        assert pair.client_to_server.data == b"req"
        assert pair.server_to_client.data == b"resp"

    def test_syn_consumes_sequence_number(self):
        pair = list(reassemble([seg(999, b"", syn=True), seg(1000, b"hello")]))[0]
        assert pair.client_to_server.data == b"hello"
        assert not pair.client_to_server.lossy

    def test_emit_on_fin_both_sides(self):
        segs = [seg(1, b"a"), rseg(1, b"b"), seg(2, b"", fin=True),
                rseg(2, b"", fin=True),
                # a second connection afterwards
                seg(1, b"zz", sport=41000)]
        pairs = list(reassemble(segs))
        assert len(pairs) == 2
        assert pairs[0].client_to_server.data == b"a"

    def test_rst_tears_down_connection(self):
        pairs = list(reassemble([seg(1, b"a"), seg(2, b"", rst=True),
                                 seg(1, b"new", sport=41000)]))
        assert len(pairs) == 2

    def test_buffer_overflow_flushes_lossy(self):
        segs = [seg(0, b"x" * 600), seg(600, b"y" * 600)]
        pairs = list(reassemble(segs, max_buffer=1000))
        assert len(pairs) == 1
        assert pairs[0].client_to_server.lossy
        assert pairs[0].client_to_server.data == b"x" * 600

    def test_total_bytes_equal_retained_sum(self, rng):
        segs = []
        offset = 0
        for i in range(20):
            n = int(rng.integers(1, 50))
            segs.append(seg(3000 + offset, bytes(rng.integers(65, 91, n, dtype=np.uint8)),
                            ts=float(i)))
            offset += n
        # sprinkle duplicates
        segs += segs[::4]
        pair = list(reassemble(segs))[0]
        d = pair.client_to_server
        assert len(d.data) == sum(r.length for r in d.ranges) == offset

    def test_seq_wraparound(self):
        start = 2 ** 32 - 3
        pair = list(reassemble([seg(start, b"abc"), seg(0, b"def")]))[0]
        assert pair.client_to_server.data == b"abcdef"
        assert not pair.client_to_server.lossy

    def test_client_by_port_without_syn(self):
        # no handshake captured: the higher port is taken as the client
        pairs = list(reassemble([rseg(10, b"resp-first"), seg(5, b"req")]))
        assert pairs[0].client_ip == "1.1.1.1"
        assert pairs[0].client_to_server.data == b"req"
