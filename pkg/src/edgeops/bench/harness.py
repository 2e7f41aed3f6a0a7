"""Overhead and latency experiments: throttled per-sample timing, sweeps, live JIT check."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..collector import Collector, CollectorConfig, OverheadReport
from ..detectors import Detector
from ..stream import BoundedChannel
from .dataset import SyntheticSpec, generate_matrix

log = logging.getLogger(__name__)

WARMUP_SAMPLES = 100
SLEEP_QUANTUM = 1e-3
DEFAULT_BUDGETS = tuple(round(1.0 - 0.1 * i, 1) for i in range(10))
PLOT_NAMES = {"birch": "BIRCH", "rnn": "LSTM", "arima": "ARIMA"}
LATENCY_NOTE = "# ms/sample: pure per-sample processing (decode excluded) including throttle sleep"


@dataclass(frozen=True)
class CpuBudget:
    fraction: float

    def __post_init__(self) -> None:
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError(f"CPU budget must be in (0, 1], got {self.fraction}")


@dataclass
class LatencyRow:
    algorithm: str
    budget: float
    mean_ms: float
    std_ms: float
    samples: int
    cpu_utilization: float = float("nan")
    busy_ms: float = float("nan")  # raw processing only, no throttle sleep


class Throttle:
    """Sleep-based token bucket: after ``t`` seconds busy, owe ``t(1-b)/b`` seconds idle.

    Debt is paid in sleeps of at least ``SLEEP_QUANTUM``; oversleep is
    credited back, so the long-run duty cycle converges to ``b``. Callers
    charge CPU time, as a cgroup quota does; charging wall time would also
    bill hypervisor steal to the workload.
    """

    def __init__(self, budget: float, quantum: float = SLEEP_QUANTUM):
        self.budget = CpuBudget(budget).fraction
        self.ratio = (1.0 - self.budget) / self.budget
        self.quantum = quantum
        self.debt = 0.0

    def charge(self, busy: float) -> float:
        """Account ``busy`` seconds; sleep if due. Returns seconds actually slept."""
        if self.ratio == 0.0:
            return 0.0
        self.debt += busy * self.ratio
        if self.debt < self.quantum:
            return 0.0
        t0 = time.perf_counter()
        time.sleep(self.debt)
        slept = time.perf_counter() - t0
        self.debt -= slept
        return slept


def throttled_run(
    workload: Callable[[object], object],
    budget: float,
    items: Sequence,
    warmup: int = WARMUP_SAMPLES,
    algorithm: str = "",
) -> LatencyRow:
    """Run ``workload`` over ``items`` on a dedicated thread under a CPU budget."""
    result: dict = {}

    def body() -> None:
        throttle = Throttle(budget)
        lat = np.empty(len(items))
        busy_t = np.empty(len(items))
        cpu0 = time.thread_time()
        wall0 = time.perf_counter()
        cpu_mark = wall_mark = None
        for i, item in enumerate(items):
            if i == warmup:
                cpu_mark, wall_mark = time.thread_time(), time.perf_counter()
            c0, t0 = time.thread_time(), time.perf_counter()
            workload(item)
            busy = time.perf_counter() - t0
            slept = throttle.charge(time.thread_time() - c0)
            lat[i] = busy + slept
            busy_t[i] = busy
        cpu_end, wall_end = time.thread_time(), time.perf_counter()
        if cpu_mark is None:
            cpu_mark, wall_mark = cpu0, wall0
        keep = slice(warmup, None) if len(items) > warmup else slice(None)
        result["lat"], result["busy"] = lat[keep], busy_t[keep]
        wall = wall_end - wall_mark
        result["util"] = (cpu_end - cpu_mark) / wall if wall > 0 else float("nan")

    t = threading.Thread(target=body, name=f"bench-{algorithm or 'workload'}")
    t.start()
    t.join()
    lat = result["lat"] * 1e3
    return LatencyRow(
        algorithm=algorithm,
        budget=budget,
        mean_ms=float(lat.mean()) if lat.size else 0.0,
        std_ms=float(lat.std()) if lat.size else 0.0,
        samples=int(lat.size),
        cpu_utilization=float(result["util"]),
        busy_ms=float(result["busy"].mean() * 1e3) if lat.size else 0.0,
    )


def warm_kernels(algorithms: Iterable[str], dim: int, backend: str | None = None) -> None:
    """Trigger JIT compilation on throwaway detectors so it never lands in a timed run."""
    rng = np.random.default_rng(0)
    for algo in algorithms:
        d = Detector(algo, dim, backend=backend)
        for x in rng.standard_normal((5, dim)):
            d.score(x)


def detector_workload(algorithm: str, dim: int, params: dict | None = None, backend: str | None = None):
    det = Detector(algorithm, dim, params=params, backend=backend)
    return det.score


# ---------------------------------------------------------------------------
# budget sweep


def run_budget_sweep(
    algorithms: Sequence[str] = ("birch", "rnn", "arima"),
    budgets: Sequence[float] = DEFAULT_BUDGETS,
    data: np.ndarray | None = None,
    seed: int = 42,
    backend: str | None = None,
    progress: Callable[[LatencyRow], None] | None = None,
) -> list[LatencyRow]:
    if data is None:
        data = generate_matrix(SyntheticSpec(seed=seed))
    warm_kernels(algorithms, data.shape[1], backend)
    rows = []
    # one workload at a time, never concurrently
    for b in budgets:
        for algo in algorithms:
            row = throttled_run(detector_workload(algo, data.shape[1], backend=backend), b, data, algorithm=algo)
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


def budget_csv(rows: Sequence[LatencyRow]) -> str:
    """``cpu,BIRCH,LSTM,ARIMA`` in ms/sample, budgets descending."""
    cols = ["BIRCH", "LSTM", "ARIMA"]
    table: dict[float, dict[str, float]] = {}
    for r in rows:
        table.setdefault(r.budget, {})[PLOT_NAMES.get(r.algorithm, r.algorithm)] = r.mean_ms
    out = io.StringIO()
    out.write(LATENCY_NOTE + "\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["cpu", *cols])
    for b in sorted(table, reverse=True):
        w.writerow([f"{b:g}", *(repr(table[b][c]) if c in table[b] else "" for c in cols)])
    return out.getvalue()


def latency_rows_csv(rows: Sequence[LatencyRow]) -> str:
    out = io.StringIO()
    out.write(LATENCY_NOTE + "\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["algorithm", "budget", "mean_ms", "std_ms", "samples", "cpu_utilization", "busy_ms"])
    for r in rows:
        w.writerow([r.algorithm, f"{r.budget:g}", repr(r.mean_ms), repr(r.std_ms), r.samples, repr(r.cpu_utilization), repr(r.busy_ms)])
    return out.getvalue()


def read_csv_rows(text: str) -> list[dict[str, str]]:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    return list(csv.DictReader(lines))


def parse_budget_csv(text: str) -> dict[float, dict[str, float]]:
    rows = read_csv_rows(text)
    if not rows or list(rows[0]) != ["cpu", "BIRCH", "LSTM", "ARIMA"]:
        raise ValueError("budget CSV must have columns cpu,BIRCH,LSTM,ARIMA")
    return {float(r["cpu"]): {k: float(v) for k, v in r.items() if k != "cpu" and v != ""} for r in rows}


# ---------------------------------------------------------------------------
# frequency sweep (one collector subprocess per interval)


def total_memory_bytes() -> int:
    try:
        with open("/proc/meminfo") as fh:
            for line in fh:
                if line.startswith("MemTotal:"):
                    return int(line.split()[1]) * 1024
    except OSError:
        pass
    return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")


def collector_command(interval: float, duration: float, report: Path, replay: str | None = None) -> list[str]:
    cmd = [
        sys.executable, "-m", "edgeops", "collect",
        "--interval", f"{interval * 1000:g}ms",
        "--duration", f"{duration:g}s",
        "--out", f"file:{os.devnull}",
        "--report", str(report),
    ]
    if replay:
        cmd += ["--replay", replay]
    return cmd


def run_frequency_sweep(
    intervals: Sequence[float],
    duration: float,
    replay: str | None = None,
    progress: Callable[[OverheadReport], None] | None = None,
) -> list[OverheadReport]:
    reports = []
    with tempfile.TemporaryDirectory() as tmp:
        for iv in intervals:
            path = Path(tmp) / f"r{iv}.csv"
            proc = subprocess.run(collector_command(iv, duration, path, replay), capture_output=True, text=True)
            if proc.returncode != 0:
                raise RuntimeError(f"collector at {iv}s failed ({proc.returncode}): {proc.stderr.strip()}")
            rep = OverheadReport.from_csv_row(path.read_text().splitlines()[-1])
            reports.append(rep)
            if progress is not None:
                progress(rep)
    return reports


def overhead_csv(reports: Sequence[OverheadReport]) -> str:
    lines = [OverheadReport.CSV_HEADER] + [r.csv_row() for r in reports]
    return "\n".join(lines) + "\n"


def frequency_csv(reports: Sequence[OverheadReport], total_mem: int | None = None) -> str:
    """``ms,cpu,mem``: interval, self CPU in percent of one core, RSS in percent of host memory."""
    total_mem = total_mem or total_memory_bytes()
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["ms", "cpu", "mem"])
    for r in reports:
        w.writerow([f"{r.interval * 1000:.0f}", repr(100.0 * r.cpu_self_fraction), repr(100.0 * r.rss_bytes / total_mem)])
    return out.getvalue()


def parse_frequency_csv(text: str) -> list[tuple[float, float, float]]:
    rows = read_csv_rows(text)
    if not rows or list(rows[0]) != ["ms", "cpu", "mem"]:
        raise ValueError("frequency CSV must have columns ms,cpu,mem")
    return [(float(r["ms"]), float(r["cpu"]), float(r["mem"])) for r in rows]


# ---------------------------------------------------------------------------
# just-in-time check


@dataclass
class JitReport:
    algorithm: str
    interval: float
    duration: float
    passed: bool
    max_depth: int
    cpu_fraction: float
    samples: int
    backlog: list[tuple[float, int]] = field(default_factory=list)

    def to_json(self) -> dict:
        return asdict(self)


def busy_workload(seconds: float) -> Callable[[object], None]:
    def work(_item) -> None:
        end = time.perf_counter() + seconds
        while time.perf_counter() < end:
            pass

    return work


def run_jit_check(
    interval: float,
    algorithm: str,
    duration: float,
    config: CollectorConfig | None = None,
    workload: Callable[[object], object] | None = None,
    backend: str | None = None,
) -> JitReport:
    """Collector thread -> bounded channel -> detector thread, for ``duration`` seconds.

    Passes iff the channel never holds more than one sample, i.e. each
    sample is consumed before the next one is produced.
    """
    config = config or CollectorConfig(interval)
    if workload is None:
        from ..collector import HEADER

        warm_kernels([algorithm], len(HEADER), backend)
        det = Detector(algorithm, len(HEADER), backend=backend)
        workload = lambda s: det.score(s.values)  # noqa: E731
    channel = BoundedChannel(64)
    collector = Collector(config)
    backlog: list[tuple[float, int]] = []
    consumed = [0]
    t_start = time.perf_counter()

    def produce() -> None:
        try:
            for s in collector.samples(duration=duration):
                channel.put(s)
                backlog.append((time.perf_counter() - t_start, channel.depth))
        finally:
            channel.close()

    def consume() -> None:
        for s in channel:
            workload(s)
            consumed[0] += 1

    cpu0 = time.process_time()
    threads = [threading.Thread(target=produce, name="jit-collector"), threading.Thread(target=consume, name="jit-detector")]
    for t in threads:
        t.start()
    # a hopeless backlog is already a verdict; do not wait for a 2 s/sample consumer to drain it
    threads[0].join()
    collector.stop()
    drain_deadline = time.perf_counter() + max(2 * interval, 1.0)
    while threads[1].is_alive() and time.perf_counter() < drain_deadline:
        threads[1].join(0.05)
    wall = time.perf_counter() - t_start
    cpu = time.process_time() - cpu0
    max_depth = channel.max_depth
    return JitReport(
        algorithm=algorithm,
        interval=interval,
        duration=duration,
        passed=max_depth <= 1,
        max_depth=max_depth,
        cpu_fraction=cpu / wall if wall > 0 else float("nan"),
        samples=consumed[0],
        backlog=backlog,
    )


def jit_csv(reports: Sequence[JitReport]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["algorithm", "interval_ms", "cpu", "max_depth", "samples", "passed"])
    for r in reports:
        w.writerow([PLOT_NAMES.get(r.algorithm, r.algorithm), f"{r.interval * 1000:.0f}", repr(100.0 * r.cpu_fraction), r.max_depth, r.samples, int(r.passed)])
    return out.getvalue()


# ---------------------------------------------------------------------------
# plot data


def plotdata(in_dir: str | Path, out_dir: str | Path) -> list[Path]:
    """Collect sweep outputs into fig2.csv (frequency), fig3.csv (budget), fig4.csv (JIT)."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for src, dst, parse in (
        ("frequency.csv", "fig2.csv", parse_frequency_csv),
        ("budget.csv", "fig3.csv", parse_budget_csv),
    ):
        path = in_dir / src
        if path.is_file():
            text = path.read_text()
            parse(text)  # schema check
            (out_dir / dst).write_text(text)
            written.append(out_dir / dst)
    jit_rows = []
    for path in sorted(in_dir.glob("jit*.json")):
        jit_rows.append(JitReport(**json.loads(path.read_text())))
    if jit_rows:
        (out_dir / "fig4.csv").write_text(jit_csv(jit_rows))
        written.append(out_dir / "fig4.csv")
    return written

