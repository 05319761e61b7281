"""Classic pcap reading/writing, TCP decoding and per-direction stream reassembly.

Only libpcap's classic format is supported (both byte orders), linktype 1
(Ethernet) and IPv4/TCP inside.  Everything else is skipped, not an error.
Reassembled connections come out as immutable TcpStreamPair values with
per-byte-range metadata (timestamp, TTL) so that downstream HTTP parsing can
attribute wire facts to individual messages.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, BinaryIO

PCAP_MAGIC_LE = 0xA1B2C3D4
PCAP_MAGIC_BE = 0xD4C3B2A1
LINKTYPE_ETHERNET = 1

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

ETHERTYPE_IPV4 = 0x0800
IPPROTO_TCP = 6

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_ACK = 0x10

SEQ_MOD = 2 ** 32

DEFAULT_MAX_BUFFER = 4 * 1024 * 1024  # per direction, per connection


class CaptureError(Exception):
    pass


class UnsupportedMagic(CaptureError):
    """File does not start with a classic pcap magic number."""


class TruncatedHeader(CaptureError):
    """File ends inside a global or record header."""


class UnsupportedLinkType(CaptureError):
    """Capture link type is not Ethernet."""


class MalformedHeader(CaptureError):
    """Packet length fields are inconsistent with the captured bytes."""


@dataclass(frozen=True)
class RawPacket:
    timestamp: float  # seconds since epoch
    captured_bytes: bytes
    original_length: int


@dataclass(frozen=True)
class TcpSegment:
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int
    seq: int
    payload: bytes
    syn: bool = False
    fin: bool = False
    rst: bool = False
    ack: bool = False
    ip_ttl: int = 64
    timestamp: float = 0.0


@dataclass(frozen=True)
class SegmentRange:
    """Bytes [offset, offset+length) of a direction stream and their origin."""

    offset: int
    length: int
    timestamp: float
    ip_ttl: int
    capture_index: int


@dataclass(frozen=True)
class DirectionStream:
    src_port: int
    dst_port: int
    data: bytes = b""
    ranges: tuple[SegmentRange, ...] = ()
    lossy: bool = False
    payload_segments: int = 0

    def range_at(self, offset: int) -> SegmentRange | None:
        """Metadata of the retained range covering a stream offset."""
        for r in self.ranges:
            if r.offset <= offset < r.offset + r.length:
                return r
        return self.ranges[-1] if self.ranges else None


@dataclass(frozen=True)
class TcpStreamPair:
    client_ip: str
    server_ip: str
    client_port: int
    server_port: int
    client_to_server: DirectionStream
    server_to_client: DirectionStream

    @property
    def lossy(self) -> bool:
        return self.client_to_server.lossy or self.server_to_client.lossy

    @property
    def payload_segments(self) -> int:
        return (self.client_to_server.payload_segments
                + self.server_to_client.payload_segments)


def read_capture(path) -> Iterator[RawPacket]:
    """Yield RawPackets from a classic pcap file, in file order.

    Raises UnsupportedMagic / TruncatedHeader / UnsupportedLinkType before the
    first packet is produced.
    """
    with open(path, "rb") as fh:
        header = fh.read(GLOBAL_HEADER_LEN)
        if len(header) < GLOBAL_HEADER_LEN:
            raise TruncatedHeader(f"{path}: global header is {len(header)} bytes")
        magic_le = struct.unpack("<I", header[:4])[0]
        if magic_le == PCAP_MAGIC_LE:
            endian = "<"
        elif magic_le == PCAP_MAGIC_BE:
            endian = ">"
        else:
            raise UnsupportedMagic(f"{path}: magic 0x{magic_le:08x} is not classic pcap")
        _vmaj, _vmin, _zone, _sigfigs, _snaplen, linktype = struct.unpack(
            endian + "HHiIII", header[4:])
        if linktype != LINKTYPE_ETHERNET:
            raise UnsupportedLinkType(f"{path}: linktype {linktype}")
        yield from _read_records(fh, endian, path)


def _read_records(fh: BinaryIO, endian: str, path) -> Iterator[RawPacket]:
    rec = struct.Struct(endian + "IIII")
    while True:
        header = fh.read(RECORD_HEADER_LEN)
        if not header:
            return
        if len(header) < RECORD_HEADER_LEN:
            raise TruncatedHeader(f"{path}: record header is {len(header)} bytes")
        ts_sec, ts_usec, incl_len, orig_len = rec.unpack(header)
        data = fh.read(incl_len)
        if len(data) < incl_len:
            raise TruncatedHeader(f"{path}: record body truncated at {len(data)}/{incl_len}")
        yield RawPacket(ts_sec + ts_usec / 1e6, data, orig_len)


def write_capture(path, packets: Iterable[RawPacket], byte_order: str = "<") -> int:
    """Write packets as a classic pcap file; returns the record count."""
    if byte_order not in ("<", ">"):
        raise ValueError("byte_order must be '<' or '>'")
    count = 0
    with open(path, "wb") as fh:
        fh.write(struct.pack(byte_order + "IHHiIII",
                             PCAP_MAGIC_LE, 2, 4, 0, 0, 65535, LINKTYPE_ETHERNET))
        for pkt in packets:
            ts_sec = int(pkt.timestamp)
            ts_usec = int(round((pkt.timestamp - ts_sec) * 1e6))
            if ts_usec >= 1_000_000:
                ts_sec, ts_usec = ts_sec + 1, ts_usec - 1_000_000
            fh.write(struct.pack(byte_order + "IIII",
                                 ts_sec, ts_usec, len(pkt.captured_bytes),
                                 pkt.original_length))
            fh.write(pkt.captured_bytes)
            count += 1
    return count


def decode_segment(pkt: RawPacket) -> TcpSegment | None:
    """Decode Ethernet/IPv4/TCP; None means "not ours" (ARP, IPv6, UDP, ...).

    Raises MalformedHeader when length fields contradict the captured bytes.
    """
    buf = pkt.captured_bytes
    if len(buf) < 14:
        return None
    ethertype = struct.unpack("!H", buf[12:14])[0]
    if ethertype != ETHERTYPE_IPV4:
        return None
    ip = buf[14:]
    if len(ip) < 20:
        raise MalformedHeader("IPv4 header shorter than 20 bytes")
    ver_ihl = ip[0]
    if ver_ihl >> 4 != 4:
        return None
    ihl = (ver_ihl & 0x0F) * 4
    if ihl < 20:
        raise MalformedHeader(f"IPv4 IHL {ihl} below minimum")
    total_len = struct.unpack("!H", ip[2:4])[0]
    if total_len < ihl or total_len > len(ip):
        raise MalformedHeader(f"IPv4 total length {total_len} vs {len(ip)} captured")
    if ip[9] != IPPROTO_TCP:
        return None
    ttl = ip[8]
    src_ip = ".".join(str(b) for b in ip[12:16])
    dst_ip = ".".join(str(b) for b in ip[16:20])
    tcp = ip[ihl:total_len]
    if len(tcp) < 20:
        raise MalformedHeader("TCP header shorter than 20 bytes")
    src_port, dst_port, seq, _ack, off_flags = struct.unpack("!HHIIH", tcp[:14])
    data_off = (off_flags >> 12) * 4
    if data_off < 20 or data_off > len(tcp):
        raise MalformedHeader(f"TCP data offset {data_off} vs {len(tcp)} bytes")
    flags = off_flags & 0x01FF
    return TcpSegment(
        src_ip=src_ip, dst_ip=dst_ip, src_port=src_port, dst_port=dst_port,
        seq=seq, payload=tcp[data_off:],
        syn=bool(flags & TCP_SYN), fin=bool(flags & TCP_FIN),
        rst=bool(flags & TCP_RST), ack=bool(flags & TCP_ACK),
        ip_ttl=ttl, timestamp=pkt.timestamp)


@dataclass
class _Direction:
    src_port: int = 0
    dst_port: int = 0
    # (seq, payload, timestamp, ttl, capture_index) in arrival order
    segments: list = field(default_factory=list)
    buffered: int = 0
    seen_keys: set = field(default_factory=set)
    isn: int | None = None  # seq of SYN, when observed
    saw_syn: bool = False
    saw_synack: bool = False
    finished: bool = False
    lossy: bool = False
    payload_segments: int = 0


class _Connection:
    def __init__(self, key):
        self.key = key  # ((ip_a, port_a), (ip_b, port_b)) with a < b
        self.dirs = {0: _Direction(), 1: _Direction()}
        self.index = 0  # first capture index, for deterministic emit order

    def side(self, seg: TcpSegment) -> int:
        return 0 if (seg.src_ip, seg.src_port) == self.key[0] else 1

    def client_side(self) -> int:
        """Which side is the client.  Permutation invariant by construction:
        prefer the pure-SYN sender, else the higher port, else tuple order."""
        a, b = self.dirs[0], self.dirs[1]
        if a.saw_syn and not a.saw_synack and not (b.saw_syn and not b.saw_synack):
            return 0
        if b.saw_syn and not b.saw_synack and not (a.saw_syn and not a.saw_synack):
            return 1
        if self.key[0][1] != self.key[1][1]:
            return 0 if self.key[0][1] > self.key[1][1] else 1
        return 0

    def done(self) -> bool:
        return self.dirs[0].finished and self.dirs[1].finished


def _connection_key(seg: TcpSegment):
    a = (seg.src_ip, seg.src_port)
    b = (seg.dst_ip, seg.dst_port)
    return (a, b) if a <= b else (b, a)


def _assemble(d: _Direction) -> DirectionStream:
    """Order buffered segments by sequence number and splice the stream.

    Exact duplicates were already dropped; partial overlaps keep the earliest
    arrived copy of each byte.  Gaps mark the stream lossy and the retained
    bytes on both sides of a gap are concatenated.
    """
    if not d.segments:
        return DirectionStream(d.src_port, d.dst_port, lossy=d.lossy,
                               payload_segments=d.payload_segments)
    base = (d.isn + 1) % SEQ_MOD if d.isn is not None else None
    if base is None:
        base = min(s[0] for s in d.segments)
        # segments that wrapped past 0 sit numerically below the true start;
        # re-anchor on the earliest of the wrapped group when one exists
        high = [(s[0] - base) % SEQ_MOD for s in d.segments
                if (s[0] - base) % SEQ_MOD >= SEQ_MOD // 2]
        if high:
            base = (base + min(high)) % SEQ_MOD

    retained = []  # (rel_start, payload_slice, ts, ttl, idx)
    covered = []   # sorted disjoint (start, end) intervals
    for seq, payload, ts, ttl, idx in d.segments:
        rel = (seq - base) % SEQ_MOD
        if rel >= SEQ_MOD // 2:  # precedes the stream base: stale, drop
            d.lossy = True
            continue
        start, end = rel, rel + len(payload)
        # subtract already-covered intervals; first copy of a byte wins
        holes = [(start, end)]
        for cs, ce in covered:
            nxt = []
            for hs, he in holes:
                if ce <= hs or cs >= he:
                    nxt.append((hs, he))
                    continue
                if hs < cs:
                    nxt.append((hs, cs))
                if ce < he:
                    nxt.append((ce, he))
            holes = nxt
            if not holes:
                break
        for hs, he in holes:
            retained.append((hs, payload[hs - start:he - start], ts, ttl, idx))
        covered.append((start, end))
        covered.sort()
        merged = [covered[0]]
        for cs, ce in covered[1:]:
            if cs <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(merged[-1][1], ce))
            else:
                merged.append((cs, ce))
        covered = merged

    retained.sort(key=lambda r: r[0])
    lossy = d.lossy or len(covered) > 1 or (covered and covered[0][0] != 0)
    chunks = []
    ranges = []
    offset = 0
    for _rel, payload, ts, ttl, idx in retained:
        if not payload:
            continue
        chunks.append(payload)
        ranges.append(SegmentRange(offset, len(payload), ts, ttl, idx))
        offset += len(payload)
    return DirectionStream(d.src_port, d.dst_port, b"".join(chunks),
                           tuple(ranges), lossy, d.payload_segments)


def _emit(conn: _Connection) -> TcpStreamPair:
    c = conn.client_side()
    s = 1 - c
    client, server = conn.key[c], conn.key[s]
    return TcpStreamPair(
        client_ip=client[0], server_ip=server[0],
        client_port=client[1], server_port=server[1],
        client_to_server=_assemble(conn.dirs[c]),
        server_to_client=_assemble(conn.dirs[s]))


def reassemble(segments: Iterable[TcpSegment],
               max_buffer: int = DEFAULT_MAX_BUFFER) -> Iterator[TcpStreamPair]:
    """Group TCP segments into connections and reassemble both directions.

    Connections are emitted once both sides have sent FIN or RST, or at end of
    input.  A direction whose buffered payload would exceed max_buffer is
    flushed early and marked lossy.
    """
    conns: dict = {}
    next_index = 0
    for seg in segments:
        key = _connection_key(seg)
        conn = conns.get(key)
        if conn is None:
            conn = _Connection(key)
            conn.index = next_index
            conns[key] = conn
        side = conn.side(seg)
        d = conn.dirs[side]
        if d.src_port == 0:
            d.src_port, d.dst_port = seg.src_port, seg.dst_port
        if seg.syn:
            d.saw_syn = True
            d.saw_synack = d.saw_synack or seg.ack
            d.isn = seg.seq
        if seg.fin or seg.rst:
            d.finished = True
            if seg.rst:
                conn.dirs[1 - side].finished = True
        if seg.payload:
            dedup_key = (seg.seq, len(seg.payload))
            if dedup_key not in d.seen_keys:
                d.seen_keys.add(dedup_key)
                if d.buffered + len(seg.payload) > max_buffer:
                    d.lossy = True
                    yield _emit(conn)
                    del conns[key]
                    continue
                d.segments.append((seg.seq, seg.payload, seg.timestamp,
                                   seg.ip_ttl, next_index))
                d.buffered += len(seg.payload)
                d.payload_segments += 1
        next_index += 1
        if conn.done():
            yield _emit(conn)
            del conns[key]
    for conn in sorted(conns.values(), key=lambda c: c.index):
        yield _emit(conn)
