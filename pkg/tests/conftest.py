import numpy as np
import pytest

from hstf import Flow, HttpMessage, LABEL_BENIGN, LABEL_MALICIOUS


def make_request(url="/index.html", method="GET", headers=None, body=b"",
                 ts=100.0, ttl=64, sport=49152, dport=80, version=1.1):
    return HttpMessage(kind="request", method=method, url=url, version=version,
                       headers=headers if headers is not None else [("Host", "x")],
                       body=body, src_port=sport, dst_port=dport, ip_ttl=ttl,
                       timestamp=ts)


def make_response(status=200, headers=None, body=b"", ts=100.1, ttl=54,
                  sport=80, dport=49152, version=1.1):
    return HttpMessage(kind="response", status_code=status, version=version,
                       headers=headers if headers is not None else [],
                       body=body, src_port=sport, dst_port=dport, ip_ttl=ttl,
                       timestamp=ts)


def make_flow(messages, label=LABEL_BENIGN, flow_id="f0", **kw):
    for i, m in enumerate(messages):
        m.capture_index = i
        if m.wire_length == 0:
            from hstf import serialize_message
            m.wire_length = len(serialize_message(m))
    return Flow(flow_id=flow_id, messages=messages, label=label, **kw)


def random_flow(rng: np.random.Generator, max_messages=12) -> Flow:
    """Arbitrary well-formed flow for shape/property tests, including corner
    shapes: zero headers, 47+ headers, empty bodies, long flows."""
    n = int(rng.integers(1, max_messages + 1))
    messages = []
    t = float(rng.uniform(0, 1e9))
    sport = int(rng.integers(1024, 65536))
    for i in range(n):
        n_headers = int(rng.choice([0, 1, 3, 8, 47, 55]))
        headers = [(f"X-H{j}", "v" * int(rng.integers(0, 30)))
                   for j in range(n_headers)]
        body = bytes(rng.integers(0, 256, size=int(rng.choice([0, 0, 10, 300])),
                                  dtype=np.uint8))
        if rng.random() < 0.5:
            url = "/" + "u" * int(rng.integers(0, 300))
            m = make_request(url=url, method=str(rng.choice(
                ["GET", "POST", "HEAD", "PUT", "OPTIONS"])),
                headers=headers, body=body, ts=t, sport=sport,
                ttl=int(rng.integers(1, 255)))
        else:
            m = make_response(status=int(rng.choice(
                [200, 201, 204, 301, 304, 400, 404, 500, 503])),
                headers=headers, body=body, ts=t, dport=sport,
                ttl=int(rng.integers(1, 255)))
        messages.append(m)
        t += float(rng.uniform(0, 2.0))
    label = LABEL_MALICIOUS if rng.random() < 0.5 else LABEL_BENIGN
    return make_flow(messages, label=label, flow_id=f"rf{rng.integers(1e9)}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
