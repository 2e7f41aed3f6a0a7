"""Host resource collector: /proc counters -> 28-metric samples at a fixed rate."""

from __future__ import annotations

import json
import logging
import os
import re
import resource
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Protocol

import numpy as np

from ._util import parse_duration
from .stream import MetricHeader, Sample

log = logging.getLogger(__name__)

METRIC_NAMES = (
    "cpu.utilization", "cpu.user", "cpu.system", "cpu.iowait", "cpu.steal",
    "load.1", "load.5", "load.15",
    "mem.used_frac", "mem.free_bytes", "mem.cached_bytes", "mem.buffers_bytes", "mem.swap_used_frac",
    "net.rx_bytes_per_s", "net.tx_bytes_per_s", "net.rx_packets_per_s", "net.tx_packets_per_s",
    "net.rx_errs_per_s", "net.tx_errs_per_s",
    "disk.read_bytes_per_s", "disk.write_bytes_per_s", "disk.read_ops_per_s", "disk.write_ops_per_s",
    "disk.io_time_frac",
    "proc.running", "proc.blocked", "proc.ctxt_switches_per_s", "proc.forks_per_s",
)
HEADER = MetricHeader(METRIC_NAMES)

MIN_INTERVAL = 0.1
MAX_INTERVAL = 10.0

# cumulative counters, grouped by the /proc file they come from
CPU_FIELDS = ("user", "nice", "system", "idle", "iowait", "irq", "softirq", "steal")
NET_FIELDS = ("rx_bytes", "rx_packets", "rx_errs", "tx_bytes", "tx_packets", "tx_errs")
DISK_FIELDS = ("read_ops", "read_sectors", "write_ops", "write_sectors", "io_ms")
_VIRTUAL_DISKS = ("loop", "ram", "zram", "dm-", "sr", "md")
_PARTITION_RE = re.compile(r"p?\d+")


class CollectionError(RuntimeError):
    def __init__(self, group: str, reason: str):
        super().__init__(f"cannot read {group} counters: {reason}")
        self.group = group


@dataclass
class Snapshot:
    """Raw counter snapshot. ``counters`` are cumulative, ``gauges`` instantaneous."""

    timestamp: int
    counters: dict[str, float]
    gauges: dict[str, float]

    def to_json(self) -> dict:
        return {"ts_ns": self.timestamp, "counters": self.counters, "gauges": self.gauges}

    @classmethod
    def from_json(cls, obj: dict) -> "Snapshot":
        return cls(int(obj["ts_ns"]), dict(obj["counters"]), dict(obj["gauges"]))


# ---------------------------------------------------------------------------
# snapshot sources


class SnapshotSource(Protocol):
    def read(self) -> Snapshot: ...


class ProcSource:
    """Parses /proc (or another root with the same layout)."""

    def __init__(self, root: str | os.PathLike = "/proc"):
        self.root = Path(root)

    def _text(self, group: str, name: str) -> str:
        try:
            return (self.root / name).read_text()
        except OSError as exc:
            raise CollectionError(group, str(exc)) from exc

    def _cpu(self, counters: dict, gauges: dict) -> None:
        text = self._text("cpu", "stat")
        try:
            for line in text.splitlines():
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "cpu":
                    vals = [float(v) for v in parts[1:9]]
                    vals += [0.0] * (8 - len(vals))
                    for k, v in zip(CPU_FIELDS, vals):
                        counters[f"cpu.{k}"] = v
                elif parts[0] == "ctxt":
                    counters["proc.ctxt"] = float(parts[1])
                elif parts[0] == "processes":
                    counters["proc.forks"] = float(parts[1])
                elif parts[0] == "procs_running":
                    gauges["proc.running"] = float(parts[1])
                elif parts[0] == "procs_blocked":
                    gauges["proc.blocked"] = float(parts[1])
        except (ValueError, IndexError) as exc:
            raise CollectionError("cpu", f"malformed stat: {exc}") from exc
        if "cpu.user" not in counters:
            raise CollectionError("cpu", "no aggregate cpu line")

    def _load(self, gauges: dict) -> None:
        parts = self._text("load", "loadavg").split()
        try:
            gauges["load.1"], gauges["load.5"], gauges["load.15"] = map(float, parts[:3])
        except ValueError as exc:
            raise CollectionError("load", str(exc)) from exc

    def _mem(self, gauges: dict) -> None:
        info = {}
        for line in self._text("mem", "meminfo").splitlines():
            key, _, rest = line.partition(":")
            fields = rest.split()
            if fields:
                try:
                    info[key] = float(fields[0]) * (1024.0 if len(fields) > 1 else 1.0)
                except ValueError:
                    continue
        try:
            total = info["MemTotal"]
            avail = info.get("MemAvailable", info["MemFree"] + info.get("Cached", 0.0) + info.get("Buffers", 0.0))
            gauges["mem.total_bytes"] = total
            gauges["mem.used_frac"] = (total - avail) / total if total else 0.0
            gauges["mem.free_bytes"] = info["MemFree"]
            gauges["mem.cached_bytes"] = info.get("Cached", 0.0)
            gauges["mem.buffers_bytes"] = info.get("Buffers", 0.0)
            swap = info.get("SwapTotal", 0.0)
            gauges["mem.swap_used_frac"] = (swap - info.get("SwapFree", 0.0)) / swap if swap else 0.0
        except KeyError as exc:
            raise CollectionError("mem", f"missing field {exc}") from exc

    def _net(self, counters: dict) -> None:
        totals = dict.fromkeys(NET_FIELDS, 0.0)
        for line in self._text("net", "net/dev").splitlines()[2:]:
            iface, _, rest = line.partition(":")
            if iface.strip() == "lo":
                continue
            f = rest.split()
            if len(f) < 12:
                continue
            totals["rx_bytes"] += float(f[0])
            totals["rx_packets"] += float(f[1])
            totals["rx_errs"] += float(f[2])
            totals["tx_bytes"] += float(f[8])
            totals["tx_packets"] += float(f[9])
            totals["tx_errs"] += float(f[10])
        for k, v in totals.items():
            counters[f"net.{k}"] = v

    def _disk(self, counters: dict) -> None:
        rows = {}
        for line in self._text("disk", "diskstats").splitlines():
            f = line.split()
            if len(f) >= 14 and not f[2].startswith(_VIRTUAL_DISKS):
                rows[f[2]] = f
        totals = dict.fromkeys(DISK_FIELDS, 0.0)
        for name, f in rows.items():
            # partitions (sda1, nvme0n1p2) would double count their parent device
            if any(name != base and _PARTITION_RE.fullmatch(name[len(base):]) and name.startswith(base) for base in rows):
                continue
            totals["read_ops"] += float(f[3])
            totals["read_sectors"] += float(f[5])
            totals["write_ops"] += float(f[7])
            totals["write_sectors"] += float(f[9])
            totals["io_ms"] += float(f[12])
        for k, v in totals.items():
            counters[f"disk.{k}"] = v

    def read(self) -> Snapshot:
        counters: dict[str, float] = {}
        gauges: dict[str, float] = {}
        self._cpu(counters, gauges)
        self._load(gauges)
        self._mem(gauges)
        self._net(counters)
        self._disk(counters)
        gauges.setdefault("proc.running", 0.0)
        gauges.setdefault("proc.blocked", 0.0)
        counters.setdefault("proc.ctxt", 0.0)
        counters.setdefault("proc.forks", 0.0)
        return Snapshot(time.time_ns(), counters, gauges)


class ReplaySource:
    """Replays a recorded NDJSON snapshot trace, one snapshot per ``read``."""

    def __init__(self, path: str | os.PathLike, loop: bool = False):
        self.path = Path(path)
        with open(self.path, encoding="utf-8") as fh:
            self._snaps = [Snapshot.from_json(json.loads(line)) for line in fh if line.strip()]
        if not self._snaps:
            raise CollectionError("replay", f"{self.path} holds no snapshots")
        self.loop = loop
        self._i = 0

    def read(self) -> Snapshot:
        if self._i >= len(self._snaps):
            if not self.loop:
                raise CollectionError("replay", "trace exhausted")
            self._i = 0
        snap = self._snaps[self._i]
        self._i += 1
        return Snapshot(snap.timestamp, dict(snap.counters), dict(snap.gauges))


def record_trace(source: SnapshotSource, path: str | os.PathLike, count: int, interval: float = 0.0) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(count):
            if i and interval:
                time.sleep(interval)
            fh.write(json.dumps(source.read().to_json()) + "\n")


def read_metrics_snapshot(source: SnapshotSource | None = None) -> Snapshot:
    return (source or ProcSource()).read()


# ---------------------------------------------------------------------------
# derivation


def _rate(prev: Snapshot, cur: Snapshot, key: str, elapsed: float) -> float:
    a = prev.counters.get(key, 0.0)
    b = cur.counters.get(key, 0.0)
    if b < a:
        log.warning("counter %s wrapped or reset (%s -> %s); rate clamped to 0", key, a, b)
        return 0.0
    return (b - a) / elapsed


def _delta(prev: Snapshot, cur: Snapshot, key: str) -> float:
    d = cur.counters.get(key, 0.0) - prev.counters.get(key, 0.0)
    if d < 0:
        log.warning("counter %s wrapped or reset; delta clamped to 0", key)
        return 0.0
    return d


def derive_sample(prev: Snapshot, cur: Snapshot, elapsed: float, tags: dict[str, str] | None = None) -> Sample:
    """Turn two snapshots into one 28-metric sample (rates per second, fractions in [0, 1])."""
    if not elapsed > 0:
        raise ValueError(f"elapsed must be > 0, got {elapsed}")
    g = cur.gauges
    cpu = {k: _delta(prev, cur, f"cpu.{k}") for k in CPU_FIELDS}
    total = sum(cpu.values())

    def frac(x: float) -> float:
        return x / total if total > 0 else 0.0

    busy = total - cpu["idle"] - cpu["iowait"]
    values = {
        "cpu.utilization": frac(busy),
        "cpu.user": frac(cpu["user"] + cpu["nice"]),
        "cpu.system": frac(cpu["system"] + cpu["irq"] + cpu["softirq"]),
        "cpu.iowait": frac(cpu["iowait"]),
        "cpu.steal": frac(cpu["steal"]),
        "load.1": g.get("load.1", 0.0),
        "load.5": g.get("load.5", 0.0),
        "load.15": g.get("load.15", 0.0),
        "mem.used_frac": g.get("mem.used_frac", 0.0),
        "mem.free_bytes": g.get("mem.free_bytes", 0.0),
        "mem.cached_bytes": g.get("mem.cached_bytes", 0.0),
        "mem.buffers_bytes": g.get("mem.buffers_bytes", 0.0),
        "mem.swap_used_frac": g.get("mem.swap_used_frac", 0.0),
        "net.rx_bytes_per_s": _rate(prev, cur, "net.rx_bytes", elapsed),
        "net.tx_bytes_per_s": _rate(prev, cur, "net.tx_bytes", elapsed),
        "net.rx_packets_per_s": _rate(prev, cur, "net.rx_packets", elapsed),
        "net.tx_packets_per_s": _rate(prev, cur, "net.tx_packets", elapsed),
        "net.rx_errs_per_s": _rate(prev, cur, "net.rx_errs", elapsed),
        "net.tx_errs_per_s": _rate(prev, cur, "net.tx_errs", elapsed),
        "disk.read_bytes_per_s": 512.0 * _rate(prev, cur, "disk.read_sectors", elapsed),
        "disk.write_bytes_per_s": 512.0 * _rate(prev, cur, "disk.write_sectors", elapsed),
        "disk.read_ops_per_s": _rate(prev, cur, "disk.read_ops", elapsed),
        "disk.write_ops_per_s": _rate(prev, cur, "disk.write_ops", elapsed),
        "disk.io_time_frac": min(1.0, _delta(prev, cur, "disk.io_ms") / 1000.0 / elapsed),
        "proc.running": g.get("proc.running", 0.0),
        "proc.blocked": g.get("proc.blocked", 0.0),
        "proc.ctxt_switches_per_s": _rate(prev, cur, "proc.ctxt", elapsed),
        "proc.forks_per_s": _rate(prev, cur, "proc.forks", elapsed),
    }
    return Sample(cur.timestamp, np.fromiter((values[n] for n in METRIC_NAMES), dtype=np.float64, count=28), dict(tags or {}))


# ---------------------------------------------------------------------------
# collection loop


@dataclass
class CollectorConfig:
    interval: float = 0.5
    tags: dict[str, str] = field(default_factory=dict)
    source: str = "os-counters"
    replay_path: str | None = None

    def __post_init__(self) -> None:
        self.interval = parse_duration(self.interval)
        # tolerate float noise at the range edges
        if not MIN_INTERVAL - 1e-9 <= self.interval <= MAX_INTERVAL + 1e-9:
            raise ValueError(f"interval must be within [100ms, 10s], got {self.interval}s")
        if self.source not in ("os-counters", "synthetic-replay"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.source == "synthetic-replay" and not self.replay_path:
            raise ValueError("synthetic-replay needs a trace path")

    def open_source(self) -> SnapshotSource:
        if self.source == "synthetic-replay":
            return ReplaySource(self.replay_path, loop=True)
        return ProcSource()


@dataclass
class OverheadReport:
    interval: float
    cpu_self_fraction: float
    rss_bytes: int
    samples_emitted: int
    wall_time: float
    error: str | None = None

    CSV_HEADER = "interval_ms,cpu_frac,rss_bytes,samples,wall_s"

    def csv_row(self) -> str:
        return f"{self.interval * 1000:.0f},{self.cpu_self_fraction:.6f},{self.rss_bytes},{self.samples_emitted},{self.wall_time:.3f}"

    @classmethod
    def from_csv_row(cls, row: str) -> "OverheadReport":
        ms, cpu, rss, n, wall = row.strip().split(",")
        return cls(float(ms) / 1000.0, float(cpu), int(rss), int(n), float(wall))


def peak_rss_bytes() -> int:
    """Peak resident set of this process image.

    ru_maxrss survives execve, so a child forked from a large parent would
    report the parent's peak; VmHWM belongs to the new address space.
    """
    try:
        with open("/proc/self/status") as fh:
            for line in fh:
                if line.startswith("VmHWM:"):
                    return int(line.split()[1]) * 1024
    except (OSError, ValueError, IndexError):
        pass
    # ru_maxrss is KiB on Linux
    return int(resource.getrusage(resource.RUSAGE_SELF).ru_maxrss) * 1024


class Collector:
    """Emits one sample per interval into ``emit`` until stopped.

    The first snapshot is only a baseline: the first sample is emitted at
    ``t0 + interval``. Deadlines are absolute, so the loop does not drift.
    """

    def __init__(self, config: CollectorConfig, source: SnapshotSource | None = None):
        self.config = config
        self.source = source or config.open_source()
        self._stop = threading.Event()
        self.emitted = 0

    def stop(self) -> None:
        self._stop.set()

    def samples(self, duration: float | None = None, max_samples: int | None = None) -> Iterator[Sample]:
        interval = self.config.interval
        prev = self.source.read()
        prev_t = time.monotonic()
        start = prev_t
        k = 0
        while not self._stop.is_set():
            k += 1
            deadline = start + k * interval
            if duration is not None and deadline > start + duration + 1e-9:
                return
            if self._stop.wait(max(0.0, deadline - time.monotonic())):
                return
            cur = self.source.read()
            now = time.monotonic()
            elapsed = now - prev_t
            if elapsed <= 0:
                continue
            yield derive_sample(prev, cur, elapsed, self.config.tags)
            self.emitted += 1
            prev, prev_t = cur, now
            if max_samples is not None and self.emitted >= max_samples:
                return

    def run(self, emit: Callable[[Sample], None], duration: float | None = None, max_samples: int | None = None) -> OverheadReport:
        cpu0 = time.process_time()
        wall0 = time.monotonic()
        error = None
        try:
            for s in self.samples(duration, max_samples):
                emit(s)
        except Exception as exc:  # sink failure ends the run with a partial report
            log.error("collector stopped: %s", exc)
            error = str(exc)
        wall = time.monotonic() - wall0
        cpu = time.process_time() - cpu0
        return OverheadReport(
            interval=self.config.interval,
            cpu_self_fraction=max(cpu, 0.0) / wall if wall > 0 else 0.0,
            rss_bytes=peak_rss_bytes(),
            samples_emitted=self.emitted,
            wall_time=wall,
            error=error,
        )


def run_collector(
    config: CollectorConfig,
    sink,
    duration: float | None = None,
    max_samples: int | None = None,
    stop_event: threading.Event | None = None,
) -> OverheadReport:
    """Collect into ``sink`` (an object with ``write`` or a callable)."""
    collector = Collector(config)
    if stop_event is not None:
        collector._stop = stop_event
    emit = sink.write if hasattr(sink, "write") else sink
    return collector.run(emit, duration, max_samples)
