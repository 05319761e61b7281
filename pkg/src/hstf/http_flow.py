"""HTTP/1.x message parsing over reassembled streams, flow assembly and masking.

A "flow" here is one TCP connection's ordered request/response messages, the
unit everything downstream classifies.  Parsing is deliberately narrow:
request/status line, CRLF-terminated headers, Content-Length or chunked
bodies.  Sensitive header values and URL paths can be replaced by truncated
SHA-256 digests; the numeric lengths used as features are recorded at parse
time so masking never changes them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

from .capture import TcpStreamPair, DirectionStream

MAX_HEADER_SECTION = 64 * 1024
MAX_LINE = 16 * 1024

LABEL_BENIGN = "benign"
LABEL_MALICIOUS = "malicious"
LABEL_UNLABELED = "unlabeled"

DEFAULT_MASKED_FIELDS = frozenset({"host", "cookie", "authorization", "referer"})

_METHOD_TOKENS = (b"GET", b"POST", b"HEAD", b"PUT", b"DELETE", b"OPTIONS",
                  b"PATCH", b"TRACE", b"CONNECT")
_VERSIONS = {b"HTTP/0.9": 0.9, b"HTTP/1.0": 1.0, b"HTTP/1.1": 1.1}


class MalformedMessage(Exception):
    pass


class EmptyFlow(Exception):
    """A stream produced no HTTP messages."""


@dataclass
class HttpMessage:
    kind: str  # "request" | "response"
    version: float = 1.1
    method: str | None = None
    url: str | None = None
    status_code: int | None = None
    headers: list[tuple[str, str]] = field(default_factory=list)
    body: bytes = b""
    wire_length: int = 0
    src_port: int = 0
    dst_port: int = 0
    ip_ttl: int = 0
    timestamp: float = 0.0
    capture_index: int = 0
    # lengths frozen before any masking; these are the feature inputs
    url_len: int | None = None
    value_lens: list[int] | None = None
    body_len: int | None = None

    def __post_init__(self):
        if self.url_len is None:
            self.url_len = len(self.url) if self.url else 0
        if self.value_lens is None:
            self.value_lens = [len(v) for _, v in self.headers]
        if self.body_len is None:
            self.body_len = len(self.body)

    @property
    def is_request(self) -> bool:
        return self.kind == "request"


@dataclass
class Flow:
    flow_id: str
    messages: list[HttpMessage]
    label: str = LABEL_UNLABELED
    lossy: bool = False
    # TCP segments that carried payload; None when the flow never touched a
    # capture (e.g. synthetic corpora), in which case one segment per message
    # is assumed
    payload_segments: int | None = None


@dataclass(frozen=True)
class MaskConfig:
    fields_to_mask: frozenset = DEFAULT_MASKED_FIELDS
    hash_output_length: int = 16
    mask_url_path: bool = False


def mask_value(domain: str, value: str, length: int = 16) -> str:
    """Deterministic one-way replacement, domain-separated so equal values in
    different fields do not collide to equal digests."""
    digest = hashlib.sha256(f"{domain.lower()}\x00{value}".encode("utf-8", "surrogateescape"))
    return digest.hexdigest()[:length]


def mask_flow(flow: Flow, cfg: MaskConfig = MaskConfig()) -> Flow:
    """Return a copy of the flow with configured header values and optionally
    URL paths replaced by digests.  Recorded lengths are untouched."""
    masked_fields = {f.lower() for f in cfg.fields_to_mask}
    out = []
    for msg in flow.messages:
        headers = [(n, mask_value(n, v, cfg.hash_output_length)
                    if n.lower() in masked_fields else v)
                   for n, v in msg.headers]
        url = msg.url
        if cfg.mask_url_path and url:
            path, sep, query = url.partition("?")
            url = "/" + mask_value("url", path, cfg.hash_output_length) + sep + query
        out.append(replace(msg, headers=headers, url=url,
                           url_len=msg.url_len, value_lens=list(msg.value_lens),
                           body_len=msg.body_len))
    return replace(flow, messages=out)


def serialize_message(msg: HttpMessage) -> bytes:
    """Wire form of a message: start line, headers, blank line, body."""
    if msg.is_request:
        if msg.version == 0.9:
            start = f"{msg.method} {msg.url}"
        else:
            start = f"{msg.method} {msg.url} HTTP/{msg.version:.1f}"
    else:
        start = f"HTTP/{msg.version:.1f} {msg.status_code} {_reason(msg.status_code)}"
    lines = [start.encode("latin-1")]
    lines += [f"{n}: {v}".encode("latin-1") for n, v in msg.headers]
    return b"\r\n".join(lines) + b"\r\n\r\n" + msg.body


_REASONS = {200: "OK", 204: "No Content", 206: "Partial Content",
            301: "Moved Permanently", 302: "Found", 304: "Not Modified",
            400: "Bad Request", 403: "Forbidden", 404: "Not Found",
            500: "Internal Server Error", 502: "Bad Gateway",
            503: "Service Unavailable"}


def _reason(code) -> str:
    return _REASONS.get(code, "Unknown")


def _parse_start_line(line: bytes):
    """Classify and split a start line; returns a dict or raises."""
    if line.startswith(b"HTTP/"):
        parts = line.split(b" ", 2)
        if len(parts) < 2 or parts[0] not in _VERSIONS:
            raise MalformedMessage(f"bad status line {line[:40]!r}")
        if not (len(parts[1]) == 3 and parts[1].isdigit()):
            raise MalformedMessage(f"bad status code in {line[:40]!r}")
        code = int(parts[1])
        if not 100 <= code <= 599:
            raise MalformedMessage(f"status {code} out of range")
        if parts[0] == b"HTTP/0.9":
            # 0.9 has no status line at all; anything claiming one is junk
            raise MalformedMessage("HTTP/0.9 response with status line")
        return {"kind": "response", "version": _VERSIONS[parts[0]], "status": code}
    parts = line.split(b" ")
    if len(parts) == 3 and parts[2] in _VERSIONS and parts[0] in _METHOD_TOKENS:
        return {"kind": "request", "version": _VERSIONS[parts[2]],
                "method": parts[0].decode("latin-1"),
                "url": parts[1].decode("latin-1")}
    if len(parts) == 2 and parts[0] == b"GET":
        # HTTP/0.9 simple request
        return {"kind": "request", "version": 0.9, "method": "GET",
                "url": parts[1].decode("latin-1")}
    raise MalformedMessage(f"unrecognized start line {line[:40]!r}")


def _decode_chunked(data: bytes, pos: int):
    """Decode a chunked body starting at pos; returns (body, end_pos)."""
    body = bytearray()
    while True:
        eol = data.find(b"\r\n", pos)
        if eol < 0 or eol - pos > MAX_LINE:
            raise MalformedMessage("unterminated chunk size line")
        size_token = data[pos:eol].split(b";", 1)[0].strip()
        try:
            size = int(size_token, 16)
        except ValueError:
            raise MalformedMessage(f"bad chunk size {size_token[:20]!r}")
        pos = eol + 2
        if size == 0:
            # skip optional trailers up to the final blank line
            end = data.find(b"\r\n", pos)
            while end >= 0 and end != pos:
                pos = end + 2
                end = data.find(b"\r\n", pos)
            if end < 0:
                raise MalformedMessage("unterminated chunk trailer")
            return bytes(body), end + 2
        if pos + size + 2 > len(data):
            raise MalformedMessage("chunk extends past stream end")
        body += data[pos:pos + size]
        pos += size + 2


def _parse_direction(stream: DirectionStream, expect: str | None = None) -> list[HttpMessage]:
    """Scan one direction for messages.  Returns what was parsed before the
    first unrecoverable desync; a non-HTTP stream comes back empty."""
    data = stream.data
    messages: list[HttpMessage] = []
    pos = 0
    while pos < len(data):
        msg_start = pos
        head_end = data.find(b"\r\n\r\n", pos, pos + MAX_HEADER_SECTION + 4)
        if head_end < 0:
            break  # oversized or truncated header section: abandon
        head = data[pos:head_end]
        lines = head.split(b"\r\n")
        try:
            start = _parse_start_line(lines[0])
            if expect and start["kind"] != expect:
                raise MalformedMessage(f"expected {expect}")
        except MalformedMessage:
            if not messages and pos == 0:
                return []  # not HTTP at all
            pos = head_end + 4  # skip past the unparseable head
            continue
        try:
            if max(len(l) for l in lines) > MAX_LINE:
                raise MalformedMessage("header line too long")
            headers = []
            for raw in lines[1:]:
                name, sep, value = raw.partition(b":")
                if not sep or not name or name.strip() != name:
                    raise MalformedMessage(f"bad header line {raw[:40]!r}")
                headers.append((name.decode("latin-1"),
                                value.strip(b" \t").decode("latin-1")))
        except MalformedMessage:
            pos = head_end + 4  # skip to the next message boundary
            continue

        body_start = head_end + 4
        hmap = {n.lower(): v for n, v in headers}
        try:
            if hmap.get("transfer-encoding", "").lower() == "chunked":
                body, pos = _decode_chunked(data, body_start)
            elif "content-length" in hmap:
                try:
                    length = int(hmap["content-length"])
                except ValueError:
                    raise MalformedMessage("bad Content-Length")
                if length < 0 or body_start + length > len(data):
                    raise MalformedMessage("Content-Length past stream end")
                body = data[body_start:body_start + length]
                pos = body_start + length
            elif start["kind"] == "request":
                body, pos = b"", body_start
            elif start["status"] < 200 or start["status"] in (204, 304):
                body, pos = b"", body_start
            else:
                # close-delimited response body
                body, pos = data[body_start:], len(data)
        except MalformedMessage:
            break  # framing desync: stop with what we have

        origin = stream.range_at(msg_start)
        messages.append(HttpMessage(
            kind=start["kind"], version=start["version"],
            method=start.get("method"), url=start.get("url"),
            status_code=start.get("status"), headers=headers, body=body,
            wire_length=pos - msg_start,
            src_port=stream.src_port, dst_port=stream.dst_port,
            ip_ttl=origin.ip_ttl if origin else 0,
            timestamp=origin.timestamp if origin else 0.0,
            capture_index=origin.capture_index if origin else 0))
    return messages


def parse_messages(stream: TcpStreamPair) -> list[HttpMessage]:
    """Parse both directions of a connection and merge by time.

    Ties are broken by capture order, so a request observed in the same
    microsecond as its response still sorts first.
    """
    client = _parse_direction(stream.client_to_server, expect="request")
    server = _parse_direction(stream.server_to_client, expect="response")
    merged = client + server
    merged.sort(key=lambda m: (m.timestamp, m.capture_index))
    return merged


def build_flow(stream: TcpStreamPair, label: str = LABEL_UNLABELED,
               flow_id: str | None = None) -> Flow:
    """Assemble a Flow from a reassembled connection.

    Raises EmptyFlow when neither direction contained HTTP.
    """
    messages = parse_messages(stream)
    if not messages:
        raise EmptyFlow(f"{stream.client_ip}:{stream.client_port} -> "
                        f"{stream.server_ip}:{stream.server_port}")
    if flow_id is None:
        flow_id = (f"{stream.client_ip}:{stream.client_port}-"
                   f"{stream.server_ip}:{stream.server_port}-"
                   f"{messages[0].timestamp:.6f}")
    return Flow(flow_id=flow_id, messages=messages, label=label,
                lossy=stream.lossy, payload_segments=stream.payload_segments)


# --- NDJSON interchange ------------------------------------------------------
# One flow per line.  Bodies are dropped (privacy, size); their lengths and the
# pre-mask URL/value lengths travel alongside so features survive the trip.

def message_to_json(msg: HttpMessage) -> dict:
    d = {"kind": msg.kind, "version": msg.version,
         "headers": [[n, v] for n, v in msg.headers],
         "body_len": msg.body_len, "wire_length": msg.wire_length,
         "src_port": msg.src_port, "dst_port": msg.dst_port,
         "ttl": msg.ip_ttl, "ts": msg.timestamp,
         "url_len": msg.url_len, "value_lens": msg.value_lens}
    if msg.is_request:
        d["method"] = msg.method
        d["url"] = msg.url
    else:
        d["status"] = msg.status_code
    return d


def message_from_json(d: dict, capture_index: int = 0) -> HttpMessage:
    headers = [(n, v) for n, v in d.get("headers", [])]
    return HttpMessage(
        kind=d["kind"], version=float(d.get("version", 1.1)),
        method=d.get("method"), url=d.get("url"), status_code=d.get("status"),
        headers=headers, body=b"",
        wire_length=int(d.get("wire_length", 0)),
        src_port=int(d.get("src_port", 0)), dst_port=int(d.get("dst_port", 0)),
        ip_ttl=int(d.get("ttl", 0)), timestamp=float(d.get("ts", 0.0)),
        capture_index=capture_index,
        url_len=d.get("url_len"),
        value_lens=list(d["value_lens"]) if "value_lens" in d else None,
        body_len=int(d.get("body_len", 0)))


def flow_to_json(flow: Flow) -> dict:
    d = {"flow_id": flow.flow_id, "label": flow.label, "lossy": flow.lossy,
         "messages": [message_to_json(m) for m in flow.messages]}
    if flow.payload_segments is not None:
        d["payload_segments"] = flow.payload_segments
    return d


def flow_from_json(d: dict) -> Flow:
    messages = [message_from_json(m, i) for i, m in enumerate(d.get("messages", []))]
    return Flow(flow_id=str(d.get("flow_id", "")), messages=messages,
                label=d.get("label", LABEL_UNLABELED),
                lossy=bool(d.get("lossy", False)),
                payload_segments=d.get("payload_segments"))


def write_flows(path, flows: Iterable[Flow]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        for flow in flows:
            fh.write(json.dumps(flow_to_json(flow), separators=(",", ":")))
            fh.write("\n")
            count += 1
    return count


def read_flows(path) -> Iterator[Flow]:
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield flow_from_json(json.loads(line))
