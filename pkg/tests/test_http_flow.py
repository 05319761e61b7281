import hashlib
import json

import pytest

from hstf.capture import DirectionStream, SegmentRange, TcpStreamPair
from hstf import http_flow
from hstf.http_flow import (EmptyFlow, Flow, MaskConfig, build_flow, flow_from_json,
                            flow_to_json, mask_flow, mask_value, parse_messages,
                            read_flows, serialize_message, write_flows)
from conftest import make_flow, make_request, make_response


def stream_pair(c2s=b"", s2c=b"", c2s_meta=None, s2c_meta=None):
    def direction(data, meta, sport, dport):
        if meta is None and data:
            meta = [(0, len(data), 100.0, 64, 0)]
        ranges = tuple(SegmentRange(*m) for m in (meta or []))
        return DirectionStream(sport, dport, data, ranges,
                               payload_segments=len(ranges))
    return TcpStreamPair(client_ip="1.1.1.1", server_ip="2.2.2.2",
                         client_port=40000, server_port=80,
                         client_to_server=direction(c2s, c2s_meta, 40000, 80),
                         server_to_client=direction(s2c, s2c_meta, 80, 40000))


class TestParseMessages:
    def test_minimal_request(self):
        msgs = parse_messages(stream_pair(c2s=b"GET /a HTTP/1.1\r\nHost: x\r\n\r\n"))
        assert len(msgs) == 1
        m = msgs[0]
        assert m.kind == "request" and m.method == "GET" and m.url == "/a"
        assert m.version == 1.1 and m.headers == [("Host", "x")]
        assert m.body == b"" and m.status_code is None

    def test_empty_stream(self):
        assert parse_messages(stream_pair()) == []

    def test_non_http_stream(self):
        assert parse_messages(stream_pair(c2s=b"\x16\x03\x01\x02\x00" * 40)) == []

    def test_content_length_body(self):
        data = b"POST /u HTTP/1.1\r\nContent-Length: 5\r\n\r\nhelloGET /n HTTP/1.1\r\n\r\n"
        msgs = parse_messages(stream_pair(c2s=data))
        assert [m.method for m in msgs] == ["POST", "GET"]
        assert msgs[0].body == b"hello"
        assert msgs[0].wire_length == len(b"POST /u HTTP/1.1\r\nContent-Length: 5\r\n\r\nhello")

    def test_chunked_body(self):
        data = (b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n"
                b"4\r\nWiki\r\n5\r\npedia\r\n0\r\n\r\n")
        msgs = parse_messages(stream_pair(s2c=data))
        assert msgs[0].body == b"Wikipedia"
        assert msgs[0].wire_length == len(data)

    def test_response_status_and_reason(self):
        msgs = parse_messages(stream_pair(s2c=b"HTTP/1.0 404 Not Found\r\n\r\n"))
        m = msgs[0]
        assert m.kind == "response" and m.status_code == 404 and m.version == 1.0
        assert m.method is None

    def test_close_delimited_response(self):
        msgs = parse_messages(stream_pair(s2c=b"HTTP/1.0 200 OK\r\n\r\nrest of stream"))
        assert msgs[0].body == b"rest of stream"

    def test_no_body_statuses(self):
        data = (b"HTTP/1.1 304 Not Modified\r\n\r\n"
                b"HTTP/1.1 204 No Content\r\n\r\n"
                b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok")
        msgs = parse_messages(stream_pair(s2c=data))
        assert [m.status_code for m in msgs] == [304, 204, 200]
        assert [m.body for m in msgs] == [b"", b"", b"ok"]

    def test_http09_response_rejected(self):
        # 0.9 responses carry no status line; raw payload is not HTTP here
        assert parse_messages(stream_pair(s2c=b"<html>old</html>")) == []

    def test_http09_simple_request(self):
        msgs = parse_messages(stream_pair(c2s=b"GET /legacy\r\n\r\n"))
        assert msgs[0].version == 0.9 and msgs[0].url == "/legacy"

    def test_desync_keeps_partial_result(self):
        data = (b"GET /ok HTTP/1.1\r\n\r\n"
                b"GET /bad HTTP/1.1\r\nContent-Length: 99999\r\n\r\nshort")
        msgs = parse_messages(stream_pair(c2s=data))
        assert [m.url for m in msgs] == ["/ok"]

    def test_bad_start_line_skips_to_next_boundary(self):
        data = (b"GET /one HTTP/1.1\r\n\r\n"
                b"garbage without colon structure\r\nmore\r\n\r\n"
                b"GET /two HTTP/1.1\r\n\r\n")
        msgs = parse_messages(stream_pair(c2s=data))
        assert [m.url for m in msgs] == ["/one", "/two"]

    def test_oversized_header_line_abandons(self):
        data = b"GET /x HTTP/1.1\r\nA: " + b"v" * (17 * 1024) + b"\r\n\r\n"
        data += b"GET /y HTTP/1.1\r\n\r\n"
        msgs = parse_messages(stream_pair(c2s=data))
        assert [m.url for m in msgs] == ["/y"]

    def test_merge_order_by_timestamp_then_capture(self):
        c2s = b"GET /a HTTP/1.1\r\n\r\nGET /b HTTP/1.1\r\n\r\n"
        s2c = b"HTTP/1.1 200 OK\r\nContent-Length: 0\r\n\r\n"
        half = len(c2s) // 2
        msgs = parse_messages(stream_pair(
            c2s=c2s, s2c=s2c,
            c2s_meta=[(0, half, 100.0, 64, 0), (half, len(c2s) - half, 100.2, 64, 2)],
            s2c_meta=[(0, len(s2c), 100.1, 54, 1)]))
        assert [m.url or m.status_code for m in msgs] == ["/a", 200, "/b"]
        assert [m.ip_ttl for m in msgs] == [64, 54, 64]

    def test_wire_metadata_copied(self):
        msgs = parse_messages(stream_pair(c2s=b"GET / HTTP/1.1\r\n\r\n"))
        m = msgs[0]
        assert (m.src_port, m.dst_port, m.timestamp, m.ip_ttl) == (40000, 80, 100.0, 64)


class TestBuildFlow:
    def test_request_response_pair(self):
        flow = build_flow(stream_pair(
            c2s=b"GET / HTTP/1.1\r\n\r\n", s2c=b"HTTP/1.1 200 OK\r\nContent-Length: 0\r\n\r\n",
            c2s_meta=[(0, 18, 100.0, 64, 0)], s2c_meta=[(0, 38, 100.5, 54, 1)]))
        assert len(flow.messages) == 2
        assert flow.messages[0].is_request
        assert flow.payload_segments == 2

    def test_request_only_flow(self):
        flow = build_flow(stream_pair(c2s=b"GET / HTTP/1.1\r\n\r\n"))
        assert len(flow.messages) == 1

    def test_empty_flow_raises(self):
        with pytest.raises(EmptyFlow):
            build_flow(stream_pair(c2s=b"not http at all"))

    def test_five_transactions_alternate(self):
        reqs = b"".join(b"GET /r%d HTTP/1.1\r\n\r\n" % i for i in range(5))
        resps = b"".join(b"HTTP/1.1 200 OK\r\nContent-Length: 0\r\n\r\n" for _ in range(5))
        rlen, plen = len(reqs) // 5, len(resps) // 5
        c2s_meta = [(i * rlen, rlen, 100.0 + i, 64, 2 * i) for i in range(5)]
        s2c_meta = [(i * plen, plen, 100.5 + i, 54, 2 * i + 1) for i in range(5)]
        flow = build_flow(stream_pair(c2s=reqs, s2c=resps,
                                      c2s_meta=c2s_meta, s2c_meta=s2c_meta))
        assert len(flow.messages) == 10
        assert [m.kind for m in flow.messages] == ["request", "response"] * 5


class TestMasking:
    def test_empty_mask_config_is_identity(self):
        flow = make_flow([make_request(headers=[("Host", "secret.example")])])
        masked = mask_flow(flow, MaskConfig(fields_to_mask=frozenset()))
        assert masked.messages[0].headers == flow.messages[0].headers
        assert masked.messages[0].url == flow.messages[0].url

    def test_deterministic(self):
        flow = make_flow([make_request(headers=[("Cookie", "a=1"), ("Host", "h")])])
        a, b = mask_flow(flow), mask_flow(flow)
        assert a.messages[0].headers == b.messages[0].headers

    def test_host_digest_matches_documented_hash(self):
        flow = make_flow([make_request(headers=[("Host", "evil.example.com")])])
        masked = mask_flow(flow)
        digest = masked.messages[0].headers[0][1]
        expected = hashlib.sha256(b"host\x00evil.example.com").hexdigest()[:16]
        assert digest == expected
        assert digest != "evil.example.com"
        assert mask_value("Host", "evil.example.com") == digest
        assert len(digest) == 16

    def test_unmasked_fields_untouched(self):
        flow = make_flow([make_request(headers=[("Accept", "*/*"), ("Host", "h")])])
        masked = mask_flow(flow)
        assert masked.messages[0].headers[0] == ("Accept", "*/*")
        assert masked.messages[0].headers[1][1] != "h"

    def test_domain_separation(self):
        assert mask_value("Host", "same") != mask_value("Cookie", "same")

    def test_url_path_masking(self):
        flow = make_flow([make_request(url="/private/path?q=1")])
        masked = mask_flow(flow, MaskConfig(mask_url_path=True))
        url = masked.messages[0].url
        assert url.endswith("?q=1") and "/private/path" not in url
        assert masked.messages[0].url_len == len("/private/path?q=1")

    def test_masking_preserves_recorded_lengths(self):
        flow = make_flow([make_request(url="/abc",
                                       headers=[("Host", "a-very-long-host.example"),
                                                ("Accept", "*/*")])])
        masked = mask_flow(flow, MaskConfig(mask_url_path=True))
        m, o = masked.messages[0], flow.messages[0]
        assert m.value_lens == o.value_lens == [24, 3]
        assert m.url_len == o.url_len == 4
        assert m.body_len == o.body_len

    def test_original_flow_untouched(self):
        flow = make_flow([make_request(headers=[("Host", "keep.me")])])
        mask_flow(flow)
        assert flow.messages[0].headers == [("Host", "keep.me")]


class TestSerialization:
    def test_serialize_request(self):
        msg = make_request(url="/a", headers=[("Host", "x")])
        assert serialize_message(msg) == b"GET /a HTTP/1.1\r\nHost: x\r\n\r\n"

    def test_serialize_response_with_body(self):
        msg = make_response(status=200, headers=[("Content-Length", "2")], body=b"ok")
        assert serialize_message(msg) == b"HTTP/1.1 200 OK\r\nContent-Length: 2\r\n\r\nok"

    def test_parse_serialize_identity(self):
        wire = b"GET /p?x=1 HTTP/1.1\r\nHost: h\r\nAccept: */*\r\n\r\n"
        msgs = parse_messages(stream_pair(c2s=wire))
        assert serialize_message(msgs[0]) == wire


class TestNdjson:
    def test_round_trip_preserves_fields(self):
        flow = make_flow([make_request(body=b"12345",
                                       headers=[("Host", "h"), ("A", "b")]),
                          make_response(status=404, body=b"x" * 9)],
                         label="malicious", flow_id="fx")
        flow.payload_segments = 7
        back = flow_from_json(flow_to_json(flow))
        assert back.flow_id == "fx" and back.label == "malicious"
        assert back.payload_segments == 7
        for a, b in zip(back.messages, flow.messages):
            assert (a.kind, a.method, a.url, a.status_code, a.version) == \
                   (b.kind, b.method, b.url, b.status_code, b.version)
            assert a.headers == b.headers
            assert a.body_len == b.body_len  # bodies themselves are dropped
            assert a.body == b""
            assert (a.wire_length, a.src_port, a.dst_port, a.ip_ttl, a.timestamp) == \
                   (b.wire_length, b.src_port, b.dst_port, b.ip_ttl, b.timestamp)
            assert a.url_len == b.url_len and a.value_lens == b.value_lens

    def test_json_round_trip_stable(self):
        flow = make_flow([make_request()])
        once = flow_to_json(flow)
        twice = flow_to_json(flow_from_json(json.loads(json.dumps(once))))
        assert once == twice

    def test_write_read_files(self, tmp_path):
        flows = [make_flow([make_request()], flow_id=f"f{i}") for i in range(5)]
        path = tmp_path / "flows.ndjson"
        assert write_flows(path, flows) == 5
        back = list(read_flows(path))
        assert [f.flow_id for f in back] == [f"f{i}" for i in range(5)]

    def test_masked_flow_keeps_pre_mask_lengths_through_ndjson(self):
        flow = make_flow([make_request(headers=[("Host", "very-long-host.example")])])
        masked = mask_flow(flow)
        back = flow_from_json(flow_to_json(masked))
        assert back.messages[0].value_lens == [len("very-long-host.example")]
        assert back.messages[0].headers[0][1] != "very-long-host.example"
