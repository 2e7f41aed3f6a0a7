"""Sample data model, binary/CSV codecs and stream endpoints.

Binary layout (big-endian throughout)::

    "ZOPS" | u8 version=1 | u32 name count | (u16 len + utf-8 name)*
    then records until EOF:
    u64 timestamp_ns | u16 len + utf-8 "k1=v1,k2=v2" | f64 * name count

CSV layout: ``time,tags,<name1>,...,<nameN>`` with RFC3339 nanosecond
timestamps and shortest round-trip float text.
"""

from __future__ import annotations

import csv
import io
import logging
import queue
import socket
import struct
import sys
import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"ZOPS"
FORMAT_VERSION = 1
DEFAULT_QUEUE_CAPACITY = 64

_PREAMBLE = struct.Struct(">4sBI")
_U16 = struct.Struct(">H")
_REC_HEAD = struct.Struct(">QH")
_U64_MAX = (1 << 64) - 1


class CodecError(ValueError):
    """Malformed or inconsistent stream content."""

    def __init__(self, msg: str, *, offset: int | None = None, index: int | None = None):
        where = []
        if index is not None:
            where.append(f"sample {index}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{msg} ({', '.join(where)})" if where else msg)
        self.offset = offset
        self.index = index


class TransportError(IOError):
    """An endpoint could not be opened or failed mid-stream."""


# ---------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class MetricHeader:
    names: tuple[str, ...]

    def __init__(self, names: Iterable[str]):
        names = tuple(names)
        if len(set(names)) != len(names):
            raise CodecError("duplicate metric names in header")
        for n in names:
            if not isinstance(n, str):
                raise CodecError(f"metric name must be str, got {type(n).__name__}")
            if len(n.encode("utf-8")) > 0xFFFF:
                raise CodecError(f"metric name too long: {n[:32]!r}...")
        object.__setattr__(self, "names", names)

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


@dataclass(eq=False)
class Sample:
    """One timestamped metric vector. Equality is bit-exact on the values."""

    timestamp: int
    values: np.ndarray
    tags: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise CodecError("sample values must be a 1-D vector")
        if not 0 <= int(self.timestamp) <= _U64_MAX:
            raise CodecError(f"timestamp out of u64 range: {self.timestamp}")
        self.timestamp = int(self.timestamp)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.timestamp == other.timestamp
            and self.tags == other.tags
            and list(self.tags) == list(other.tags)
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    def __repr__(self) -> str:
        return f"Sample(ts={self.timestamp}, tags={self.tags}, values={self.values.tolist()})"


def format_tags(tags: dict[str, str]) -> str:
    parts = []
    for k, v in tags.items():
        if not k or "," in k or "=" in k:
            raise CodecError(f"invalid tag key {k!r}")
        if "," in v:
            raise CodecError(f"invalid tag value {v!r} for key {k!r}")
        parts.append(f"{k}={v}")
    return ",".join(parts)


def parse_tags(text: str) -> dict[str, str]:
    tags: dict[str, str] = {}
    if not text:
        return tags
    for part in text.split(","):
        k, sep, v = part.partition("=")
        if not sep or not k:
            raise CodecError(f"malformed tag entry {part!r}")
        if k in tags:
            raise CodecError(f"duplicate tag key {k!r}")
        tags[k] = v
    return tags


# ---------------------------------------------------------------------------
# binary codec


def encode_header(header: MetricHeader) -> bytes:
    out = bytearray(_PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header.names)))
    for name in header.names:
        raw = name.encode("utf-8")
        out += _U16.pack(len(raw))
        out += raw
    return bytes(out)


def encode_record(header: MetricHeader, sample: Sample, index: int = 0) -> bytes:
    if sample.values.shape[0] != len(header.names):
        raise CodecError(
            f"dimension mismatch: header has {len(header.names)} metrics, "
            f"sample has {sample.values.shape[0]}",
            index=index,
        )
    tag_raw = format_tags(sample.tags).encode("utf-8")
    if len(tag_raw) > 0xFFFF:
        raise CodecError("tag string longer than 65535 bytes", index=index)
    return _REC_HEAD.pack(sample.timestamp, len(tag_raw)) + tag_raw + sample.values.astype(">f8").tobytes()


def encode_binary(header: MetricHeader, samples: Sequence[Sample]) -> bytes:
    buf = io.BytesIO()
    buf.write(encode_header(header))
    for i, s in enumerate(samples):
        buf.write(encode_record(header, s, i))
    return buf.getvalue()


class BinaryReader:
    """Incremental decoder over a binary file-like object."""

    def __init__(self, fh: BinaryIO):
        self._fh = fh
        self.offset = 0
        self.count = 0
        self.header = self._read_header()
        self._dim = len(self.header.names)
        self._width = 8 * self._dim

    def _read(self, n: int, what: str, start: int) -> bytes:
        data = self._fh.read(n) if n else b""
        if len(data) != n:
            raise CodecError(
                f"truncated {what}: needed {n} bytes, got {len(data)}",
                offset=start,
                index=self.count if what.startswith("record") else None,
            )
        self.offset += n
        return data

    def _read_header(self) -> MetricHeader:
        head = self._fh.read(_PREAMBLE.size)
        if len(head) < 4 or head[:4] != MAGIC:
            raise CodecError(f"bad magic {head[:4]!r}, expected {MAGIC!r}", offset=0)
        if len(head) < _PREAMBLE.size:
            raise CodecError("truncated header", offset=0)
        _, version, count = _PREAMBLE.unpack(head)
        if version != FORMAT_VERSION:
            raise CodecError(f"unsupported format version {version}", offset=4)
        self.offset = _PREAMBLE.size
        names = []
        for _ in range(count):
            start = self.offset
            (n,) = _U16.unpack(self._read(2, "header name length", start))
            try:
                names.append(self._read(n, "header name", start).decode("utf-8"))
            except UnicodeDecodeError as exc:
                raise CodecError(f"invalid UTF-8 in metric name: {exc}", offset=start) from exc
        return MetricHeader(names)

    def read_sample(self) -> Sample | None:
        start = self.offset
        first = self._fh.read(_REC_HEAD.size)
        if not first:
            return None
        if len(first) < _REC_HEAD.size:
            raise CodecError(
                f"truncated record header: needed {_REC_HEAD.size} bytes, got {len(first)}",
                offset=start,
                index=self.count,
            )
        self.offset += _REC_HEAD.size
        ts, tlen = _REC_HEAD.unpack(first)
        try:
            tags = parse_tags(self._read(tlen, "record tags", start).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise CodecError(f"invalid UTF-8 in tags: {exc}", offset=start, index=self.count) from exc
        except CodecError as exc:
            raise CodecError(str(exc), offset=start, index=self.count) from exc
        payload = self._read(self._width, "record values", start)
        values = np.frombuffer(payload, dtype=">f8").astype(np.float64)
        self.count += 1
        return Sample(ts, values, tags)

    def __iter__(self) -> Iterator[Sample]:
        while True:
            s = self.read_sample()
            if s is None:
                return
            yield s


class BinaryWriter:
    def __init__(self, fh: BinaryIO, header: MetricHeader):
        self._fh = fh
        self.header = header
        self.count = 0
        fh.write(encode_header(header))

    def write(self, sample: Sample) -> None:
        self._fh.write(encode_record(self.header, sample, self.count))
        self.count += 1

    def flush(self) -> None:
        self._fh.flush()


def decode_binary(data: bytes) -> tuple[MetricHeader, list[Sample]]:
    reader = BinaryReader(io.BytesIO(data))
    return reader.header, list(reader)


# ---------------------------------------------------------------------------
# CSV codec

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def format_rfc3339_ns(ts: int) -> str:
    secs, nanos = divmod(int(ts), 1_000_000_000)
    dt = _EPOCH + timedelta(seconds=secs)
    return dt.strftime("%Y-%m-%dT%H:%M:%S") + f".{nanos:09d}Z"


def parse_rfc3339_ns(text: str) -> int:
    body = text.strip()
    if not body.endswith("Z"):
        raise ValueError(f"timestamp must be UTC with 'Z' suffix: {text!r}")
    body = body[:-1]
    main, _, frac = body.partition(".")
    dt = datetime.strptime(main, "%Y-%m-%dT%H:%M:%S").replace(tzinfo=timezone.utc)
    if frac and (not frac.isdigit() or len(frac) > 9):
        raise ValueError(f"bad fractional seconds in {text!r}")
    nanos = int(frac.ljust(9, "0")) if frac else 0
    delta = dt - _EPOCH
    return (delta.days * 86400 + delta.seconds) * 1_000_000_000 + nanos


def _fmt_float(x: float) -> str:
    # repr() is the shortest string that round-trips
    return repr(float(x))


def encode_csv(header: MetricHeader, samples: Sequence[Sample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "tags", *header.names])
    for i, s in enumerate(samples):
        if s.values.shape[0] != len(header.names):
            raise CodecError(
                f"dimension mismatch: header has {len(header.names)} metrics, sample has {s.values.shape[0]}",
                index=i,
            )
        w.writerow([format_rfc3339_ns(s.timestamp), format_tags(s.tags), *map(_fmt_float, s.values)])
    return buf.getvalue()


def decode_csv(text: str) -> tuple[MetricHeader, list[Sample]]:
    rows = csv.reader(io.StringIO(text))
    try:
        first = next(rows)
    except StopIteration:
        raise CodecError("empty CSV input: missing header row") from None
    if first[:2] != ["time", "tags"]:
        raise CodecError("CSV header must start with 'time,tags' (line 1)")
    header = MetricHeader(first[2:])
    width = len(first)
    samples = []
    for row in rows:
        lineno = rows.line_num
        if not row:
            continue
        if len(row) != width:
            raise CodecError(f"ragged row on line {lineno}: expected {width} fields, got {len(row)}")
        try:
            ts = parse_rfc3339_ns(row[0])
        except ValueError as exc:
            raise CodecError(f"line {lineno}: {exc}") from exc
        try:
            vals = np.array([float(v) for v in row[2:]], dtype=np.float64)
        except ValueError as exc:
            raise CodecError(f"line {lineno}: unparsable float: {exc}") from exc
        samples.append(Sample(ts, vals, parse_tags(row[1])))
    return header, samples


# ---------------------------------------------------------------------------
# bounded channel


class _Closed:
    pass


_CLOSED = _Closed()


class BoundedChannel:
    """Blocking FIFO between two pipeline stages.

    ``max_depth`` records the largest number of items ever buffered, which
    tests use to check back pressure.
    """

    def __init__(self, capacity: int = DEFAULT_QUEUE_CAPACITY):
        if capacity < 1:
            raise ValueError("channel capacity must be >= 1")
        self.capacity = capacity
        self._q: queue.SimpleQueue = queue.SimpleQueue()
        self._slots = threading.BoundedSemaphore(capacity)
        self._lock = threading.Lock()
        self._depth = 0
        self.max_depth = 0
        self._error: BaseException | None = None
        self._closed = False

    @property
    def depth(self) -> int:
        return self._depth

    def put(self, item, timeout: float | None = None) -> None:
        if self._closed:
            raise TransportError("put on closed channel")
        if not self._slots.acquire(timeout=timeout):
            raise queue.Full
        with self._lock:
            self._depth += 1
            self.max_depth = max(self.max_depth, self._depth)
        self._q.put(item)

    def get(self, timeout: float | None = None):
        item = self._q.get(timeout=timeout)
        if item is _CLOSED:
            # leave the marker for any other reader
            self._q.put(_CLOSED)
            if self._error is not None:
                raise TransportError(str(self._error)) from self._error
            raise StopIteration
        with self._lock:
            self._depth -= 1
        self._slots.release()
        return item

    def close(self, error: BaseException | None = None) -> None:
        if self._closed:
            return
        self._error = error
        self._closed = True
        self._q.put(_CLOSED)

    def __iter__(self):
        while True:
            try:
                yield self.get()
            except StopIteration:
                return


# ---------------------------------------------------------------------------
# endpoints

KINDS = ("file", "tcp-listen", "tcp-connect", "stdio")


@dataclass(frozen=True)
class StreamEndpoint:
    kind: str
    address: str = ""

    @classmethod
    def parse(cls, text: str) -> "StreamEndpoint":
        if text in ("-", "stdio"):
            return cls("stdio", "")
        kind, sep, addr = text.partition(":")
        if sep and kind in KINDS:
            ep = cls(kind, addr)
        else:
            ep = cls("file", text)
        ep.validate()
        return ep

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown endpoint kind {self.kind!r}")
        if self.kind == "file" and not self.address:
            raise ValueError("file endpoint needs a path")
        if self.kind.startswith("tcp"):
            self.host_port()

    def host_port(self) -> tuple[str, int]:
        host, sep, port = self.address.rpartition(":")
        if not sep or not port.isdigit() or not 0 <= int(port) <= 65535:
            raise ValueError(f"expected HOST:PORT, got {self.address!r}")
        return host or "127.0.0.1", int(port)

    def __str__(self) -> str:
        return self.kind if self.kind == "stdio" else f"{self.kind}:{self.address}"


def _as_endpoint(ep: StreamEndpoint | str) -> StreamEndpoint:
    return StreamEndpoint.parse(ep) if isinstance(ep, str) else ep


class _Listener:
    def __init__(self, host: str, port: int):
        try:
            self.sock = socket.create_server((host, port))
        except OSError as exc:
            raise TransportError(f"cannot listen on {host}:{port}: {exc}") from exc
        self.sock.settimeout(None)
        self.host, self.port = self.sock.getsockname()[:2]

    def accept(self) -> socket.socket:
        conn, _ = self.sock.accept()
        self.sock.close()
        return conn


def _connect(host: str, port: int, timeout: float = 10.0) -> socket.socket:
    try:
        return socket.create_connection((host, port), timeout=timeout)
    except OSError as exc:
        raise TransportError(f"cannot connect to {host}:{port}: {exc}") from exc


class SampleSource:
    """Producer side: decodes a stream on a reader thread into a bounded channel."""

    def __init__(self, endpoint: StreamEndpoint | str, capacity: int = DEFAULT_QUEUE_CAPACITY):
        self.endpoint = _as_endpoint(endpoint)
        self.channel = BoundedChannel(capacity)
        self._header: MetricHeader | None = None
        self._header_ready = threading.Event()
        self._listener: _Listener | None = None
        self._fh: BinaryIO | None = None
        self._sock: socket.socket | None = None
        ep = self.endpoint
        if ep.kind == "file":
            try:
                self._fh = open(ep.address, "rb")
            except OSError as exc:
                raise TransportError(f"cannot open {ep.address}: {exc}") from exc
        elif ep.kind == "tcp-listen":
            self._listener = _Listener(*ep.host_port())
        elif ep.kind == "tcp-connect":
            self._sock = _connect(*ep.host_port())
            self._sock.settimeout(None)
            self._fh = self._sock.makefile("rb")
        else:
            self._fh = sys.stdin.buffer
        self._thread = threading.Thread(target=self._run, name=f"source:{ep}", daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int] | None:
        """Bound (host, port) for tcp-listen endpoints."""
        if self._listener is None:
            return None
        return self._listener.host, self._listener.port

    @property
    def header(self) -> MetricHeader:
        self._header_ready.wait()
        if self._header is None:
            # surface the reader's failure
            for _ in self.channel:
                pass
            raise TransportError(f"stream {self.endpoint} ended before its header")
        return self._header

    def _run(self) -> None:
        err: BaseException | None = None
        try:
            if self._listener is not None:
                self._sock = self._listener.accept()
                self._fh = self._sock.makefile("rb")
            reader = BinaryReader(self._fh)
            self._header = reader.header
            self._header_ready.set()
            for s in reader:
                self.channel.put(s)
        except (OSError, CodecError) as exc:
            log.warning("source %s failed: %s", self.endpoint, exc)
            err = exc
        finally:
            self._header_ready.set()
            self.channel.close(err)
            self._release()

    def _release(self) -> None:
        if self._fh is not None and self.endpoint.kind != "stdio":
            try:
                self._fh.close()
            except OSError:
                pass
        if self._sock is not None:
            self._sock.close()

    def __iter__(self) -> Iterator[Sample]:
        return iter(self.channel)

    def close(self) -> None:
        self._release()


class SampleSink:
    """Consumer side: ``write`` enqueues (blocking when full); a writer thread encodes."""

    def __init__(
        self,
        endpoint: StreamEndpoint | str,
        header: MetricHeader,
        capacity: int = DEFAULT_QUEUE_CAPACITY,
        accept_timeout: float | None = None,
    ):
        self.endpoint = _as_endpoint(endpoint)
        self.header = header
        self.channel = BoundedChannel(capacity)
        self.written = 0
        self.error: BaseException | None = None
        self._listener: _Listener | None = None
        self._sock: socket.socket | None = None
        self._fh: BinaryIO | None = None
        self._accept_timeout = accept_timeout
        ep = self.endpoint
        if ep.kind == "file":
            try:
                self._fh = open(ep.address, "wb")
            except OSError as exc:
                raise TransportError(f"cannot open {ep.address}: {exc}") from exc
        elif ep.kind == "tcp-listen":
            self._listener = _Listener(*ep.host_port())
        elif ep.kind == "tcp-connect":
            self._sock = _connect(*ep.host_port())
            self._sock.settimeout(None)
            self._fh = self._sock.makefile("wb")
        else:
            self._fh = sys.stdout.buffer
        self._thread = threading.Thread(target=self._run, name=f"sink:{ep}", daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int] | None:
        if self._listener is None:
            return None
        return self._listener.host, self._listener.port

    def _run(self) -> None:
        try:
            if self._listener is not None:
                self._listener.sock.settimeout(self._accept_timeout)
                self._sock = self._listener.accept()
                self._fh = self._sock.makefile("wb")
            writer = BinaryWriter(self._fh, self.header)
            for s in self.channel:
                writer.write(s)
                self.written += 1
            writer.flush()
        except (OSError, CodecError) as exc:
            log.warning("sink %s failed: %s", self.endpoint, exc)
            self.error = exc
            # keep draining so a producer blocked on a full queue wakes up
            try:
                for _ in self.channel:
                    pass
            except TransportError:
                pass
        finally:
            if self._fh is not None and self.endpoint.kind != "stdio":
                try:
                    self._fh.close()
                except OSError:
                    pass
            if self._sock is not None:
                self._sock.close()

    def write(self, sample: Sample) -> None:
        if self.error is not None:
            raise TransportError(f"sink {self.endpoint} failed: {self.error}") from self.error
        if sample.values.shape[0] != len(self.header.names):
            raise CodecError(
                f"dimension mismatch: header has {len(self.header.names)} metrics, "
                f"sample has {sample.values.shape[0]}",
                index=self.written + self.channel.depth,
            )
        self.channel.put(sample)

    def close(self, timeout: float | None = None) -> None:
        self.channel.close()
        self._thread.join(timeout)
        if self.error is not None:
            raise TransportError(f"sink {self.endpoint} failed: {self.error}") from self.error


def open_source(endpoint: StreamEndpoint | str, capacity: int = DEFAULT_QUEUE_CAPACITY) -> SampleSource:
    return SampleSource(endpoint, capacity)


def open_sink(
    endpoint: StreamEndpoint | str, header: MetricHeader, capacity: int = DEFAULT_QUEUE_CAPACITY
) -> SampleSink:
    return SampleSink(endpoint, header, capacity)


def write_file(path: str, header: MetricHeader, samples: Iterable[Sample]) -> int:
    with open(path, "wb") as fh:
        w = BinaryWriter(fh, header)
        for s in samples:
            w.write(s)
        return w.count


def read_file(path: str) -> tuple[MetricHeader, list[Sample]]:
    with open(path, "rb") as fh:
        r = BinaryReader(fh)
        return r.header, list(r)
