"""Seeded synthetic HTTP traffic: benign browsing flows and Trojan-style
beacon flows, as Flow objects or as classic pcap captures.

Profiles are plain parameter bundles of distribution specs, so a corpus is
reproducible from (profile, seed) alone.  The default profiles aim for the
aggregate shape of real mixed traffic (mean message near 846 bytes, mean flow
near 3.65 messages) while keeping the class differences a detector should
exploit: beacon flows carry long randomized query strings, a small fixed
header set and metronome-like request intervals; benign flows get diverse
headers, varied intervals and larger, spread-out response bodies.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .capture import RawPacket, TcpSegment, write_capture
from .http_flow import Flow, HttpMessage, LABEL_BENIGN, LABEL_MALICIOUS, serialize_message

MICROS = 1_000_000


def sample_dist(rng: np.random.Generator, spec: dict) -> float:
    """Draw one value from a distribution spec dict."""
    kind = spec["kind"]
    if kind == "constant":
        return spec["value"]
    if kind == "uniform_int":
        return int(rng.integers(spec["low"], spec["high"] + 1))
    if kind == "uniform":
        return float(rng.uniform(spec["low"], spec["high"]))
    if kind == "choice":
        values = spec["values"]
        weights = spec.get("weights")
        p = None
        if weights is not None:
            w = np.asarray(weights, dtype=float)
            p = w / w.sum()
        return values[int(rng.choice(len(values), p=p))]
    if kind == "lognormal":
        return float(rng.lognormal(spec["mean"], spec["sigma"]))
    if kind == "exponential":
        return float(rng.exponential(spec["scale"]))
    raise ValueError(f"unknown distribution kind {kind!r}")


@dataclass
class GeneratorProfile:
    label: str
    url_length: dict
    transactions: dict          # request/response rounds per flow
    interval: dict              # seconds between consecutive requests
    response_delay: dict        # request -> response latency, seconds
    method: dict
    status_code: dict
    request_body: dict          # bytes, for POST-like requests
    response_body: dict         # bytes
    header_count: dict          # request headers beyond Host
    header_pool: list           # candidate request header names
    user_agents: list
    hosts: list
    client_ttl: dict
    server_ttl: dict
    response_drop: float = 0.0  # chance the final response went uncaptured

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorProfile":
        return cls(**d)


def default_benign_profile() -> GeneratorProfile:
    return GeneratorProfile(
        label=LABEL_BENIGN,
        url_length={"kind": "uniform_int", "low": 8, "high": 70},
        transactions={"kind": "choice", "values": [1, 2, 3, 4, 6],
                      "weights": [0.50, 0.28, 0.14, 0.06, 0.02]},
        interval={"kind": "lognormal", "mean": 0.0, "sigma": 1.2},
        response_delay={"kind": "uniform", "low": 0.005, "high": 0.2},
        method={"kind": "choice", "values": ["GET", "POST", "HEAD"],
                "weights": [0.82, 0.14, 0.04]},
        status_code={"kind": "choice", "values": [200, 204, 301, 302, 304, 404, 500],
                     "weights": [0.72, 0.03, 0.04, 0.06, 0.09, 0.05, 0.01]},
        request_body={"kind": "lognormal", "mean": 4.5, "sigma": 0.8},
        response_body={"kind": "lognormal", "mean": 6.7, "sigma": 0.9},
        header_count={"kind": "uniform_int", "low": 3, "high": 11},
        header_pool=["User-Agent", "Accept", "Accept-Encoding", "Accept-Language",
                     "Connection", "Referer", "Cookie", "Cache-Control",
                     "Upgrade-Insecure-Requests", "If-Modified-Since", "Origin",
                     "X-Requested-With", "DNT", "Pragma"],
        user_agents=["Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36",
                     "Mozilla/5.0 (Macintosh; Intel Mac OS X 10_15_7) Safari/605.1.15",
                     "Mozilla/5.0 (X11; Linux x86_64; rv:109.0) Gecko/20100101",
                     "Mozilla/5.0 (iPhone; CPU iPhone OS 16_5 like Mac OS X)"],
        hosts=["www.news-site.example", "cdn.static.example", "shop.example",
               "mail.webapp.example", "forum.community.example", "img.gallery.example"],
        client_ttl={"kind": "choice", "values": [64, 128], "weights": [0.6, 0.4]},
        server_ttl={"kind": "uniform_int", "low": 42, "high": 62},
        response_drop=0.04)


def default_trojan_profile() -> GeneratorProfile:
    return GeneratorProfile(
        label=LABEL_MALICIOUS,
        url_length={"kind": "uniform_int", "low": 110, "high": 240},
        transactions={"kind": "choice", "values": [1, 2, 3],
                      "weights": [0.55, 0.33, 0.12]},
        interval={"kind": "choice", "values": [15.0, 30.0, 60.0],
                  "weights": [0.3, 0.5, 0.2]},
        response_delay={"kind": "uniform", "low": 0.02, "high": 0.08},
        method={"kind": "choice", "values": ["GET", "POST"], "weights": [0.85, 0.15]},
        status_code={"kind": "choice", "values": [200, 404], "weights": [0.96, 0.04]},
        request_body={"kind": "lognormal", "mean": 4.0, "sigma": 0.5},
        response_body={"kind": "lognormal", "mean": 5.0, "sigma": 0.6},
        header_count={"kind": "constant", "value": 3},
        header_pool=["User-Agent", "Accept", "Cache-Control"],
        user_agents=["Mozilla/4.0 (compatible; MSIE 6.0; Windows NT 5.1)"],
        hosts=["update-check.svcstat.example", "api.telemetry-sync.example"],
        client_ttl={"kind": "constant", "value": 128},
        server_ttl={"kind": "constant", "value": 44},
        response_drop=0.0)


def profile_hash(profile: GeneratorProfile) -> str:
    blob = json.dumps(profile.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


_URL_CHARS = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"
_WORDS = ["index", "home", "img", "js", "css", "api", "view", "item", "page",
          "list", "user", "data", "static", "main", "search", "cart", "doc"]


def _make_url(rng: np.random.Generator, target_len: int, beacon: bool) -> str:
    if beacon:
        stem = "/" + rng.choice(["gate", "sync", "ping", "report", "update"]) + ".php?id="
    else:
        depth = int(rng.integers(1, 4))
        stem = "/" + "/".join(rng.choice(_WORDS) for _ in range(depth))
        if target_len > len(stem) + 3 and rng.random() < 0.4:
            stem += "?q="
    if len(stem) >= target_len:
        return stem[:max(target_len, 1)]
    idx = rng.integers(0, len(_URL_CHARS), size=target_len - len(stem))
    return stem + "".join(_URL_CHARS[i] for i in idx)


def _printable(rng: np.random.Generator, n: int) -> bytes:
    if n <= 0:
        return b""
    return rng.integers(33, 127, size=n, dtype=np.uint8).tobytes()


def _clip(value: float, lo: int, hi: int) -> int:
    return int(min(max(value, lo), hi))


def generate_flow(profile: GeneratorProfile, rng: np.random.Generator,
                  flow_id: str, start_us: int, client_port: int) -> Flow:
    """One synthetic flow; timestamps are microsecond-exact floats."""
    beacon = profile.label == LABEL_MALICIOUS
    host = str(rng.choice(profile.hosts))
    agent = str(rng.choice(profile.user_agents))
    client_ttl = int(sample_dist(rng, profile.client_ttl))
    server_ttl = int(sample_dist(rng, profile.server_ttl))
    n_tx = int(sample_dist(rng, profile.transactions))
    messages = []
    t_us = start_us
    for tx in range(n_tx):
        method = str(sample_dist(rng, profile.method))
        url = _make_url(rng, int(sample_dist(rng, profile.url_length)), beacon)
        body = b""
        if method == "POST":
            body = _printable(rng, _clip(sample_dist(rng, profile.request_body), 1, 4096))
        headers = [("Host", host), ("User-Agent", agent)]
        for name in _pick_headers(rng, profile):
            headers.append((name, _header_value(rng, name)))
        if body:
            headers.append(("Content-Type", "application/x-www-form-urlencoded"))
            headers.append(("Content-Length", str(len(body))))
        req = HttpMessage(kind="request", method=method, url=url, version=1.1,
                          headers=headers, body=body,
                          src_port=client_port, dst_port=80, ip_ttl=client_ttl,
                          timestamp=t_us / MICROS)
        req.wire_length = len(serialize_message(req))
        messages.append(req)

        drop = (tx == n_tx - 1) and rng.random() < profile.response_drop
        if not drop:
            status = int(sample_dist(rng, profile.status_code))
            rbody = b""
            if method != "HEAD" and status not in (204, 301, 302, 304):
                rbody = _printable(rng, _clip(sample_dist(rng, profile.response_body),
                                              16, 60000))
            rheaders = [("Server", "nginx" if not beacon else "Apache"),
                        ("Content-Type", "text/html; charset=utf-8"),
                        ("Content-Length", str(len(rbody))),
                        ("Connection", "keep-alive")]
            delay_us = int(sample_dist(rng, profile.response_delay) * MICROS)
            resp = HttpMessage(kind="response", status_code=status, version=1.1,
                               headers=rheaders, body=rbody,
                               src_port=80, dst_port=client_port, ip_ttl=server_ttl,
                               timestamp=(t_us + delay_us) / MICROS)
            resp.wire_length = len(serialize_message(resp))
            messages.append(resp)
        t_us += int(max(0.001, sample_dist(rng, profile.interval)) * MICROS)
    return Flow(flow_id=flow_id, messages=messages, label=profile.label)


def _pick_headers(rng, profile: GeneratorProfile) -> list:
    count = int(sample_dist(rng, profile.header_count))
    pool = list(profile.header_pool)
    count = min(count, len(pool))
    picked = rng.choice(len(pool), size=count, replace=False)
    return [pool[i] for i in sorted(picked)]


_HEADER_VALUES = {
    "Accept": ["text/html,application/xhtml+xml,*/*;q=0.8", "*/*",
               "application/json, text/plain, */*", "image/avif,image/webp,*/*"],
    "Accept-Encoding": ["gzip, deflate", "gzip, deflate, br", "identity"],
    "Accept-Language": ["en-US,en;q=0.9", "en-GB,en;q=0.8", "zh-CN,zh;q=0.9",
                        "de-DE,de;q=0.7"],
    "Connection": ["keep-alive", "close"],
    "Cache-Control": ["no-cache", "max-age=0"],
    "Upgrade-Insecure-Requests": ["1"],
    "DNT": ["1"],
    "Pragma": ["no-cache"],
    "X-Requested-With": ["XMLHttpRequest"],
}


def _header_value(rng, name: str) -> str:
    fixed = _HEADER_VALUES.get(name)
    if fixed:
        return str(rng.choice(fixed))
    if name == "Referer":
        return "http://" + str(rng.choice(["search.example", "link.example"])) \
            + "/" + str(rng.choice(_WORDS))
    if name == "Cookie":
        return "session=" + _printable(rng, 24).decode("latin-1").replace(";", "a")
    if name == "If-Modified-Since":
        return "Mon, 01 Apr 2024 10:00:00 GMT"
    if name == "Origin":
        return "http://app.example"
    if name == "User-Agent":
        return "Mozilla/5.0"
    return "1"


def generate_corpus(n_benign: int, n_malicious: int, seed: int = 0,
                    benign_profile: GeneratorProfile | None = None,
                    trojan_profile: GeneratorProfile | None = None) -> list[Flow]:
    """Labeled synthetic flows, shuffled deterministically under the seed."""
    benign_profile = benign_profile or default_benign_profile()
    trojan_profile = trojan_profile or default_trojan_profile()
    rng = np.random.default_rng(seed)
    base_us = 1_700_000_000 * MICROS
    flows = []
    plan = [(benign_profile, LABEL_BENIGN, i) for i in range(n_benign)] \
         + [(trojan_profile, LABEL_MALICIOUS, i) for i in range(n_malicious)]
    for k, (profile, label, i) in enumerate(plan):
        start = base_us + k * 50_000 + int(rng.integers(0, 40_000))
        port = int(rng.integers(1024, 65536))
        flows.append(generate_flow(profile, rng, f"{label}-{i:06d}", start, port))
    order = rng.permutation(len(flows))
    return [flows[i] for i in order]


def corpus_stats(flows: list[Flow]) -> dict:
    """Aggregate message/flow statistics of a corpus."""
    sizes = [m.wire_length for f in flows for m in f.messages]
    counts = [len(f.messages) for f in flows]
    return {"flows": len(flows),
            "messages": int(np.sum(counts)) if counts else 0,
            "mean_packet_size": float(np.mean(sizes)) if sizes else 0.0,
            "mean_flow_size": float(np.mean(counts)) if counts else 0.0,
            "min_flow_size": int(np.min(counts)) if counts else 0,
            "max_flow_size": int(np.max(counts)) if counts else 0}


# --- pcap synthesis ---------------------------------------------------------------

def _ipv4_checksum(header: bytes) -> int:
    total = 0
    for i in range(0, len(header), 2):
        total += (header[i] << 8) | header[i + 1]
    while total > 0xFFFF:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def segment_to_frame(seg: TcpSegment) -> bytes:
    """Ethernet/IPv4/TCP framing of one segment (checksummed IP header)."""
    eth = b"\x02\x00\x00\x00\x00\x01\x02\x00\x00\x00\x00\x02\x08\x00"
    flags = (0x02 if seg.syn else 0) | (0x01 if seg.fin else 0) \
        | (0x04 if seg.rst else 0) | (0x10 if seg.ack else 0)
    tcp = struct.pack("!HHIIHHHH", seg.src_port, seg.dst_port, seg.seq, 0,
                      (5 << 12) | flags, 65535, 0, 0) + seg.payload
    total_len = 20 + len(tcp)
    src = bytes(int(p) for p in seg.src_ip.split("."))
    dst = bytes(int(p) for p in seg.dst_ip.split("."))
    ip = struct.pack("!BBHHHBBH", 0x45, 0, total_len, 0, 0, seg.ip_ttl, 6, 0) + src + dst
    ip = ip[:10] + struct.pack("!H", _ipv4_checksum(ip)) + ip[12:]
    return eth + ip + tcp


def flow_to_segments(flow: Flow, client_ip: str, server_ip: str,
                     seed: int = 0, mss: int = 1460,
                     handshake: bool = True) -> list[TcpSegment]:
    """TCP segments that carry a flow, in natural (in-order) arrival order."""
    rng = np.random.default_rng(seed)
    client_port = flow.messages[0].src_port if flow.messages[0].is_request else \
        flow.messages[0].dst_port
    c_seq = int(rng.integers(1, 2 ** 31))
    s_seq = int(rng.integers(1, 2 ** 31))
    t0 = flow.messages[0].timestamp
    segs = []

    def c2s(**kw):
        return TcpSegment(src_ip=client_ip, dst_ip=server_ip,
                          src_port=client_port, dst_port=80, **kw)

    def s2c(**kw):
        return TcpSegment(src_ip=server_ip, dst_ip=client_ip,
                          src_port=80, dst_port=client_port, **kw)

    client_ttl = next((m.ip_ttl for m in flow.messages if m.is_request), 64)
    server_ttl = next((m.ip_ttl for m in flow.messages if not m.is_request), 64)
    if handshake:
        segs.append(c2s(seq=c_seq, payload=b"", syn=True,
                        ip_ttl=client_ttl, timestamp=t0 - 0.003))
        segs.append(s2c(seq=s_seq, payload=b"", syn=True, ack=True,
                        ip_ttl=server_ttl, timestamp=t0 - 0.002))
        segs.append(c2s(seq=c_seq + 1, payload=b"", ack=True,
                        ip_ttl=client_ttl, timestamp=t0 - 0.001))
    c_next, s_next = c_seq + 1, s_seq + 1
    last_ts = t0
    for msg in flow.messages:
        data = serialize_message(msg)
        for k in range(0, len(data), mss):
            chunk = data[k:k + mss]
            ts = msg.timestamp + (k // mss) * 2e-6
            if msg.is_request:
                segs.append(c2s(seq=c_next, payload=chunk, ack=True,
                                ip_ttl=msg.ip_ttl, timestamp=ts))
                c_next = (c_next + len(chunk)) % (2 ** 32)
            else:
                segs.append(s2c(seq=s_next, payload=chunk, ack=True,
                                ip_ttl=msg.ip_ttl, timestamp=ts))
                s_next = (s_next + len(chunk)) % (2 ** 32)
            last_ts = max(last_ts, ts)
    segs.append(c2s(seq=c_next, payload=b"", fin=True, ack=True,
                    ip_ttl=client_ttl, timestamp=last_ts + 0.001))
    segs.append(s2c(seq=s_next, payload=b"", fin=True, ack=True,
                    ip_ttl=server_ttl, timestamp=last_ts + 0.002))
    return segs


def _flow_ips(index: int, malicious: bool) -> tuple[str, str]:
    client = f"10.{(index >> 16) & 255}.{(index >> 8) & 255}.{index & 255}"
    server = f"{185 if malicious else 93}.{(index >> 8) & 255}.{index & 255}.10"
    return client, server


def flows_to_pcap(flows: list[Flow], path, seed: int = 0, mss: int = 1460) -> int:
    """Emit a capture carrying every flow; returns the packet count.

    Packets across connections are interleaved in global timestamp order, the
    natural order a capture point would record.
    """
    packets = []
    for i, flow in enumerate(flows):
        client_ip, server_ip = _flow_ips(i, flow.label == LABEL_MALICIOUS)
        for seg in flow_to_segments(flow, client_ip, server_ip,
                                    seed=seed + i, mss=mss):
            frame = segment_to_frame(seg)
            packets.append((seg.timestamp, len(packets),
                            RawPacket(seg.timestamp, frame, len(frame))))
    packets.sort(key=lambda p: (p[0], p[1]))
    return write_capture(path, (p[2] for p in packets))
