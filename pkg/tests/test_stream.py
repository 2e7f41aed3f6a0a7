from __future__ import annotations

import io
import math
import struct
import threading
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeops.stream import (
    BinaryReader,
    BoundedChannel,
    CodecError,
    MetricHeader,
    Sample,
    StreamEndpoint,
    TransportError,
    decode_binary,
    decode_csv,
    encode_binary,
    encode_csv,
    format_rfc3339_ns,
    open_sink,
    open_source,
    parse_rfc3339_ns,
)

tag_text = st.text(
    alphabet=st.characters(blacklist_characters=",=", blacklist_categories=("Cs",)), min_size=1, max_size=6
)
any_float = st.floats(allow_nan=True, allow_infinity=True, width=64)


@st.composite
def streams(draw, max_dim=5, max_n=8):
    names = draw(st.lists(st.text(max_size=8), unique=True, max_size=max_dim))
    n = draw(st.integers(0, max_n))
    ts = sorted(draw(st.lists(st.integers(0, 2**64 - 1), min_size=n, max_size=n)))
    samples = []
    for t in ts:
        vals = draw(st.lists(any_float, min_size=len(names), max_size=len(names)))
        tags = draw(st.dictionaries(tag_text, tag_text.map(lambda s: s) | st.just(""), max_size=3))
        samples.append(Sample(t, np.array(vals, dtype=np.float64), tags))
    return MetricHeader(names), samples


def _nan_with_payload(payload: int) -> float:
    return struct.unpack(">d", struct.pack(">Q", 0x7FF0000000000000 | payload))[0]


# -- binary codec


def test_empty_stream_layout():
    raw = encode_binary(MetricHeader([]), [])
    # magic(4) + version(1) + u32 name count(4)
    assert raw == b"ZOPS\x01\x00\x00\x00\x00"
    assert decode_binary(raw) == (MetricHeader([]), [])


def test_payload_length_accounting():
    names = [f"m{i}" for i in range(28)]
    header = MetricHeader(names)
    samples = [Sample(i, np.zeros(28)) for i in range(10_000)]
    raw = encode_binary(header, samples)
    head_len = 4 + 1 + 4 + sum(2 + len(n.encode()) for n in names)
    assert len(raw) - head_len == 10_000 * (8 + 2 + 28 * 8)


def test_exact_bytes_of_one_record():
    header = MetricHeader(["a"])
    raw = encode_binary(header, [Sample(5, np.array([1.0]), {"host": "e1"})])
    expected = (
        b"ZOPS\x01" + struct.pack(">I", 1) + struct.pack(">H", 1) + b"a"
        + struct.pack(">Q", 5) + struct.pack(">H", 7) + b"host=e1" + struct.pack(">d", 1.0)
    )
    assert raw == expected


def test_nan_and_negative_zero_bit_exact():
    header = MetricHeader(["x", "y"])
    odd_nan = _nan_with_payload(0xDEADBEEF)
    samples = [
        Sample(1, np.array([float("nan"), -0.0])),
        Sample(2, np.array([odd_nan, math.inf])),
        Sample(3, np.array([-math.inf, 5e-324])),
    ]
    h, out = decode_binary(encode_binary(header, samples))
    assert h == header
    assert out == samples
    assert struct.pack(">d", out[1].values[0]) == struct.pack(">d", odd_nan)
    assert math.copysign(1.0, out[0].values[1]) == -1.0


@settings(max_examples=200, deadline=None)
@given(streams())
def test_binary_round_trip_property(hs):
    header, samples = hs
    assert decode_binary(encode_binary(header, samples)) == (header, samples)


def test_dimension_mismatch_names_sample_index():
    header = MetricHeader(["a", "b"])
    samples = [Sample(0, np.zeros(2)), Sample(1, np.zeros(2)), Sample(2, np.zeros(3))]
    with pytest.raises(CodecError) as ei:
        encode_binary(header, samples)
    assert ei.value.index == 2


def test_bad_magic():
    with pytest.raises(CodecError) as ei:
        decode_binary(b"NOPE\x01\x00\x00\x00\x00")
    assert ei.value.offset == 0


def test_truncated_record_reports_record_offset():
    header = MetricHeader(["a", "b"])
    samples = [Sample(i, np.array([i, -i], dtype=float)) for i in range(3)]
    raw = encode_binary(header, samples)
    head_len = 4 + 1 + 4 + 2 * (2 + 1)
    rec_len = 8 + 2 + 16
    assert len(raw) == head_len + 3 * rec_len
    # cut the last record in the middle of its second float
    cut = raw[: head_len + 2 * rec_len + 8 + 2 + 8 + 3]
    with pytest.raises(CodecError) as ei:
        decode_binary(cut)
    assert ei.value.offset == head_len + 2 * rec_len
    assert ei.value.index == 2
    # and cut inside the record header
    with pytest.raises(CodecError) as ei:
        decode_binary(raw[: head_len + rec_len + 5])
    assert ei.value.offset == head_len + rec_len


def test_header_invariants():
    with pytest.raises(CodecError):
        MetricHeader(["a", "a"])


def test_bad_tags_rejected():
    header = MetricHeader(["a"])
    with pytest.raises(CodecError):
        encode_binary(header, [Sample(0, np.zeros(1), {"k,": "v"})])


# -- CSV codec


def test_csv_empty_stream_is_header_only():
    assert encode_csv(MetricHeader(["m1", "m2"]), []) == "time,tags,m1,m2\n"


def test_csv_fixed_point():
    ts = parse_rfc3339_ns("2020-01-01T00:00:00.000000000Z")
    assert ts == 1577836800 * 10**9
    text = encode_csv(MetricHeader(["m1", "m2"]), [Sample(ts, np.array([1.5, -0.25]))])
    assert text == "time,tags,m1,m2\n2020-01-01T00:00:00.000000000Z,,1.5,-0.25\n"
    assert decode_csv(text) == (MetricHeader(["m1", "m2"]), [Sample(ts, np.array([1.5, -0.25]))])


def test_csv_tags_are_quoted():
    text = encode_csv(MetricHeader(["m"]), [Sample(1, np.array([2.0]), {"a": "1", "b": "2"})])
    assert '"a=1,b=2"' in text
    assert decode_csv(text)[1][0].tags == {"a": "1", "b": "2"}


@pytest.mark.parametrize("ts", [0, 1, 999_999_999, 1_600_000_000_123_456_789, 2**63])
def test_rfc3339_round_trip(ts):
    assert parse_rfc3339_ns(format_rfc3339_ns(ts)) == ts


def test_csv_binary_csv_identity(rng):
    header = MetricHeader([f"m{i}" for i in range(6)])
    ts = np.sort(rng.integers(0, 2**62, size=1000))
    samples = []
    for t in ts:
        vals = rng.standard_normal(6) * 10.0 ** rng.integers(-300, 300, size=6)
        tags = {"host": f"h{rng.integers(0, 5)}"} if rng.random() < 0.5 else {}
        samples.append(Sample(int(t), vals, tags))
    text = encode_csv(header, samples)
    h2, s2 = decode_binary(encode_binary(*decode_csv(text)))
    assert encode_csv(h2, s2) == text


def test_csv_errors_carry_line_numbers():
    good = "time,tags,a,b\n1970-01-01T00:00:00.000000000Z,,1,2\n"
    with pytest.raises(CodecError, match="line 3"):
        decode_csv(good + "1970-01-01T00:00:01.000000000Z,,1\n")
    with pytest.raises(CodecError, match="line 2"):
        decode_csv("time,tags,a\n1970-01-01T00:00:00.000000000Z,,zz\n")


# -- endpoints and channels


def _samples(n, dim=3):
    return [Sample(i * 1000, np.arange(dim, dtype=float) + i, {"host": "e1"}) for i in range(n)]


def test_endpoint_parsing():
    assert StreamEndpoint.parse("file:/tmp/x") == StreamEndpoint("file", "/tmp/x")
    assert StreamEndpoint.parse("/tmp/x") == StreamEndpoint("file", "/tmp/x")
    assert StreamEndpoint.parse("tcp-connect:localhost:9000").host_port() == ("localhost", 9000)
    assert StreamEndpoint.parse("-").kind == "stdio"
    with pytest.raises(ValueError):
        StreamEndpoint.parse("tcp-listen:nohostport")


def test_file_loopback(tmp_path):
    header = MetricHeader(["a", "b", "c"])
    data = _samples(500)
    sink = open_sink(f"file:{tmp_path / 's.bin'}", header)
    for s in data:
        sink.write(s)
    sink.close()
    src = open_source(f"file:{tmp_path / 's.bin'}")
    assert src.header == header
    assert list(src) == data


def test_tcp_loopback_10k_lossless():
    header = MetricHeader([f"m{i}" for i in range(28)])
    data = [Sample(i, np.full(28, float(i))) for i in range(10_000)]
    src = open_source("tcp-listen:127.0.0.1:0")
    host, port = src.address
    sink = open_sink(f"tcp-connect:{host}:{port}", header)
    received = []
    t = threading.Thread(target=lambda: received.extend(src))
    t.start()
    for s in data:
        sink.write(s)
    sink.close()
    t.join(30)
    assert src.header == header
    assert received == data


def test_connect_refused_is_transport_error():
    src = open_source("tcp-listen:127.0.0.1:0")
    port = src.address[1]
    src.close()
    src._listener.sock.close()
    with pytest.raises(TransportError):
        open_sink(f"tcp-connect:127.0.0.1:{port}", MetricHeader(["a"]))


def test_truncated_file_source_terminates_with_error(tmp_path):
    header = MetricHeader(["a"])
    raw = encode_binary(header, _samples(3, dim=1))
    (tmp_path / "t.bin").write_bytes(raw[:-3])
    src = open_source(f"file:{tmp_path / 't.bin'}")
    got = []
    with pytest.raises(TransportError):
        for s in src:
            got.append(s)
    assert len(got) == 2


def test_back_pressure_bounded_in_flight(tmp_path):
    header = MetricHeader(["a", "b", "c"])
    path = tmp_path / "bp.bin"
    (path).write_bytes(encode_binary(header, _samples(200)))
    src = open_source(f"file:{path}", capacity=16)
    n = 0
    for _ in src:
        time.sleep(0.01)
        n += 1
    assert n == 200
    assert src.channel.max_depth <= 16
    # the producer really was throttled, not idle
    assert src.channel.max_depth >= 8


def test_channel_blocks_when_full():
    ch = BoundedChannel(2)
    ch.put(1)
    ch.put(2)
    import queue

    with pytest.raises(queue.Full):
        ch.put(3, timeout=0.05)
    assert ch.get() == 1
    ch.put(3)
    ch.close()
    assert list(ch) == [2, 3]
    assert ch.max_depth == 2


def test_order_preserved_through_channel_threads():
    ch = BoundedChannel(4)
    out = []
    t = threading.Thread(target=lambda: out.extend(ch))
    t.start()
    for i in range(1000):
        ch.put(i)
    ch.close()
    t.join(5)
    assert out == list(range(1000))


def test_reader_is_incremental():
    header = MetricHeader(["a"])
    raw = encode_binary(header, _samples(4, dim=1))
    r = BinaryReader(io.BytesIO(raw))
    assert r.read_sample().timestamp == 0
    assert r.count == 1
