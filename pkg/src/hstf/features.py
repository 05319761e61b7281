"""Hierarchical feature encoding: raw byte matrices plus packet/flow statistics.

Three encodings per flow feed the classifier:

* one 47x200 matrix per message -- each field line (start line, header lines,
  then the whole body as one final line) becomes a row of byte values scaled
  by 1/255, truncated at 200 columns and 47 rows;
* a 100-wide packet-level statistics vector (PL) per message;
* a 170-wide flow-level statistics vector (FL) per flow.

Message serializations are truncated to ``packet_size`` bytes before line
splitting, and flows are capped at 50 messages for FL purposes.  All
statistics use the lengths recorded at parse time, so privacy masking does
not disturb them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .http_flow import Flow, HttpMessage, LABEL_MALICIOUS, serialize_message

MATRIX_ROWS = 47
MATRIX_COLS = 200
PL_SIZE = 100
FL_SIZE = 170
FLOW_CAP = 50
MAX_HEADER_SLOTS = 47

REQUEST_TYPE_CODES = {"GET": 1.0, "POST": 2.0, "HEAD": 3.0}
OTHER_REQUEST_CODE = 4.0
RESPONSE_CODE = 5.0


def encode_field_line(line: bytes, width: int = MATRIX_COLS) -> np.ndarray:
    """One field line -> width numbers in [0,1]: byte/255, truncate, zero-pad."""
    out = np.zeros(width)
    take = min(len(line), width)
    if take:
        out[:take] = np.frombuffer(line[:take], dtype=np.uint8) / 255.0
    return out


def split_field_lines(msg: HttpMessage, packet_size: int) -> list[bytes]:
    """Field lines of a message after byte truncation.

    The serialized bytes are cut at packet_size first; the surviving head is
    split on CRLF and the surviving body is kept as a single final line no
    matter what it contains.
    """
    if packet_size < 1:
        raise ValueError("packet_size must be >= 1")
    serialized = serialize_message(msg)
    head_len = len(serialized) - len(msg.body)
    buf = serialized[:packet_size]
    head = buf[:head_len]
    body = buf[head_len:]
    lines = [l for l in head.split(b"\r\n") if l]
    if body:
        lines.append(body)
    return lines


def encode_packet_raw(msg: HttpMessage, packet_size: int,
                      rows: int = MATRIX_ROWS, cols: int = MATRIX_COLS) -> np.ndarray:
    """Raw feature matrix of one message: one encoded row per field line,
    at most `rows` rows, zero rows below."""
    out = np.zeros((rows, cols))
    for i, line in enumerate(split_field_lines(msg, packet_size)[:rows]):
        take = min(len(line), cols)
        if take:
            out[i, :take] = np.frombuffer(line[:take], dtype=np.uint8) / 255.0
    return out


def build_pl(msg: HttpMessage) -> np.ndarray:
    """Packet-level statistics vector, 100 wide.

    Layout (1-indexed): 1 request type, 2 source port, 3 destination port,
    4 URL length, 5 protocol version, 6-52 header name lengths, 53-99 header
    value lengths, 100 payload length.  Lengths are the pre-mask ones.
    """
    pl = np.zeros(PL_SIZE)
    if msg.is_request:
        pl[0] = REQUEST_TYPE_CODES.get((msg.method or "").upper(), OTHER_REQUEST_CODE)
    else:
        pl[0] = RESPONSE_CODE
    pl[1] = msg.src_port
    pl[2] = msg.dst_port
    pl[3] = msg.url_len if msg.is_request else 0
    pl[4] = msg.version
    for i, (name, _value) in enumerate(msg.headers[:MAX_HEADER_SLOTS]):
        pl[5 + i] = len(name)
    for i, vlen in enumerate(msg.value_lens[:MAX_HEADER_SLOTS]):
        pl[52 + i] = vlen
    pl[99] = msg.body_len
    return pl


def _dedup_key(msg: HttpMessage):
    if msg.is_request:
        return ("request", msg.method, msg.url)
    return ("response", msg.status_code)


def _run_flag(kinds: Sequence[str], kind: str) -> float:
    """1.0 when the flow contains >= 2 consecutive messages of one kind."""
    run = 0
    for k in kinds:
        run = run + 1 if k == kind else 0
        if run >= 2:
            return 1.0
    return 0.0


def build_fl(flow: Flow) -> np.ndarray:
    """Flow-level statistics vector, 170 wide; only the first 50 messages of
    the flow contribute (the established flow cap)."""
    msgs = flow.messages[:FLOW_CAP]
    n = len(msgs)
    fl = np.zeros(FL_SIZE)
    if n == 0:
        return fl
    requests = [m for m in msgs if m.is_request]
    responses = [m for m in msgs if not m.is_request]

    fl[0] = n
    fl[1] = len(requests) / n
    fl[2] = len(responses) / n

    for offset, group in ((3, requests), (5, responses)):
        if group:
            counts: dict = {}
            for m in group:
                counts[_dedup_key(m)] = counts.get(_dedup_key(m), 0) + 1
            same = sum(1 for m in group if counts[_dedup_key(m)] >= 2)
            fl[offset] = same / len(group)
            fl[offset + 1] = (len(group) - same) / len(group)

    for i, m in enumerate(msgs):
        fl[7 + i] = m.ip_ttl
        fl[109 + i] = m.wire_length
    for i in range(n - 1):
        fl[57 + i] = max(0.0, msgs[i + 1].timestamp - msgs[i].timestamp)

    total = sum(m.wire_length for m in msgs)
    fl[106] = total
    if total > 0:
        fl[107] = sum(m.wire_length for m in requests) / total
        fl[108] = sum(m.wire_length for m in responses) / total

    kinds = [m.kind for m in msgs]
    fl[159] = _run_flag(kinds, "request")
    fl[160] = _run_flag(kinds, "response")

    if requests:
        nr = len(requests)
        methods = [(m.method or "").upper() for m in requests]
        gets, posts, heads = (methods.count(k) for k in ("GET", "POST", "HEAD"))
        fl[161] = gets / nr
        fl[162] = posts / nr
        fl[163] = heads / nr
        fl[164] = (nr - gets - posts - heads) / nr
    if responses:
        ns = len(responses)
        codes = [m.status_code or 0 for m in responses]
        c2 = sum(1 for c in codes if 200 <= c < 300)
        c4 = sum(1 for c in codes if 400 <= c < 500)
        c5 = sum(1 for c in codes if 500 <= c < 600)
        fl[165] = c2 / ns
        fl[166] = c4 / ns
        fl[167] = c5 / ns
        fl[168] = (ns - c2 - c4 - c5) / ns

    segments = flow.payload_segments
    if segments is None:
        segments = len(flow.messages)
    if segments > 0:
        fl[169] = min(1.0, len(flow.messages) / segments)
    return fl


@dataclass
class EncodedFlow:
    matrices: np.ndarray  # (flow_size, rows, cols)
    pls: np.ndarray       # (flow_size, PL_SIZE)
    fl: np.ndarray        # (FL_SIZE,)
    label: int            # 1 malicious, 0 otherwise
    flow_id: str = ""


def encode_flow(flow: Flow, packet_size: int = 400, flow_size: int = 4,
                rows: int = MATRIX_ROWS, cols: int = MATRIX_COLS) -> EncodedFlow:
    """Encode the first flow_size messages (zero-padded when shorter); FL is
    computed over the whole (capped) flow regardless of flow_size."""
    if not 1 <= flow_size <= FLOW_CAP:
        raise ValueError(f"flow_size {flow_size} outside 1..{FLOW_CAP}")
    matrices = np.zeros((flow_size, rows, cols))
    pls = np.zeros((flow_size, PL_SIZE))
    for i, msg in enumerate(flow.messages[:flow_size]):
        matrices[i] = encode_packet_raw(msg, packet_size, rows, cols)
        pls[i] = build_pl(msg)
    return EncodedFlow(matrices=matrices, pls=pls, fl=build_fl(flow),
                       label=int(flow.label == LABEL_MALICIOUS),
                       flow_id=flow.flow_id)


@dataclass
class NormalizationStats:
    """Per-position min/max of the statistics vectors over a training split."""

    pl_min: np.ndarray
    pl_max: np.ndarray
    fl_min: np.ndarray
    fl_max: np.ndarray

    @classmethod
    def empty(cls) -> "NormalizationStats":
        return cls(np.full(PL_SIZE, np.inf), np.full(PL_SIZE, -np.inf),
                   np.full(FL_SIZE, np.inf), np.full(FL_SIZE, -np.inf))

    def update(self, pls: np.ndarray, fl: np.ndarray) -> None:
        p = pls.reshape(-1, PL_SIZE)
        np.minimum(self.pl_min, p.min(axis=0), out=self.pl_min)
        np.maximum(self.pl_max, p.max(axis=0), out=self.pl_max)
        np.minimum(self.fl_min, fl, out=self.fl_min)
        np.maximum(self.fl_max, fl, out=self.fl_max)

    @classmethod
    def fit(cls, encoded: Iterable[EncodedFlow]) -> "NormalizationStats":
        stats = cls.empty()
        seen = False
        for enc in encoded:
            stats.update(enc.pls, enc.fl)
            seen = True
        if not seen:
            raise ValueError("cannot fit normalization stats on nothing")
        return stats

    @classmethod
    def fit_flows(cls, flows: Iterable[Flow], packet_size: int = 400,
                  flow_size: int = 4) -> "NormalizationStats":
        """Fit from flows directly, skipping the raw matrices entirely."""
        stats = cls.empty()
        seen = False
        for flow in flows:
            pls = np.zeros((flow_size, PL_SIZE))
            for i, msg in enumerate(flow.messages[:flow_size]):
                pls[i] = build_pl(msg)
            stats.update(pls, build_fl(flow))
            seen = True
        if not seen:
            raise ValueError("cannot fit normalization stats on nothing")
        return stats

    def scale_pl(self, pls: np.ndarray) -> np.ndarray:
        return _minmax(pls, self.pl_min, self.pl_max)

    def scale_fl(self, fl: np.ndarray) -> np.ndarray:
        return _minmax(fl, self.fl_min, self.fl_max)

    def to_dict(self) -> dict:
        return {"pl_min": self.pl_min.tolist(), "pl_max": self.pl_max.tolist(),
                "fl_min": self.fl_min.tolist(), "fl_max": self.fl_max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.asarray(d["pl_min"], dtype=float),
                   np.asarray(d["pl_max"], dtype=float),
                   np.asarray(d["fl_min"], dtype=float),
                   np.asarray(d["fl_max"], dtype=float))


def _minmax(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Scale to [0,1]; positions with min == max (degenerate) map to 0 and
    out-of-range values (unseen in training) clip to the unit interval."""
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = (values - lo) / safe
    scaled = np.where(span > 0, scaled, 0.0)
    return np.clip(scaled, 0.0, 1.0)


def normalize_features(enc: EncodedFlow, stats: NormalizationStats) -> EncodedFlow:
    """Min-max scale PL/FL positions; raw matrices are already in [0,1]."""
    return EncodedFlow(matrices=enc.matrices, pls=stats.scale_pl(enc.pls),
                       fl=stats.scale_fl(enc.fl), label=enc.label,
                       flow_id=enc.flow_id)


# --- encoded dataset file ----------------------------------------------------
# Little-endian container: 4-byte magic, version byte, shape header, then one
# fixed-size float32 record per flow.

DATASET_MAGIC = b"HSTD"
DATASET_VERSION = 1


def save_dataset(path, encoded: Sequence[EncodedFlow]) -> int:
    if not encoded:
        raise ValueError("refusing to write an empty dataset")
    flow_size, rows, cols = encoded[0].matrices.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<BHHHHHQ", DATASET_VERSION, flow_size, rows, cols,
                             PL_SIZE, FL_SIZE, len(encoded)))
        for enc in encoded:
            if enc.matrices.shape != (flow_size, rows, cols):
                raise ValueError("inconsistent record shapes")
            fh.write(struct.pack("<B", enc.label))
            fh.write(enc.matrices.astype("<f4").tobytes())
            fh.write(enc.pls.astype("<f4").tobytes())
            fh.write(enc.fl.astype("<f4").tobytes())
    return len(encoded)


def load_dataset(path) -> Iterator[EncodedFlow]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != DATASET_MAGIC:
            raise ValueError(f"{path}: not an encoded dataset file")
        version, flow_size, rows, cols, pl_size, fl_size, count = struct.unpack(
            "<BHHHHHQ", fh.read(struct.calcsize("<BHHHHHQ")))
        if version != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        mat_n, pl_n = flow_size * rows * cols, flow_size * pl_size
        for _ in range(count):
            label = struct.unpack("<B", fh.read(1))[0]
            block = fh.read(4 * (mat_n + pl_n + fl_size))
            arr = np.frombuffer(block, dtype="<f4")
            yield EncodedFlow(
                matrices=arr[:mat_n].reshape(flow_size, rows, cols).astype(float),
                pls=arr[mat_n:mat_n + pl_n].reshape(flow_size, pl_size).astype(float),
                fl=arr[mat_n + pl_n:].astype(float),
                label=int(label))
