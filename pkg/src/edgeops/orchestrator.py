"""In-process operator: data sources, analysis steps and nodes reconciled into workloads.

Selectors use AND within one selector and OR across selectors. Placement
prefers the source's own node, then nodes in the source's region by free
CPU, then everything else the step's region restriction permits.
"""

from __future__ import annotations

import copy
import json
import logging
import queue
import shlex
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

from ._util import read_ndjson
from .stream import StreamEndpoint

log = logging.getLogger(__name__)

KINDS = ("DataSource", "AnalysisStep", "Node")


class RegistryError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class Resources:
    cpu_m: int = 0
    memory: int = 0

    def fits(self, request: "Resources") -> bool:
        return self.cpu_m >= request.cpu_m and self.memory >= request.memory

    def __add__(self, other: "Resources") -> "Resources":
        return Resources(self.cpu_m + other.cpu_m, self.memory + other.memory)

    def __sub__(self, other: "Resources") -> "Resources":
        return Resources(self.cpu_m - other.cpu_m, self.memory - other.memory)

    def to_json(self) -> dict:
        return {"cpu_m": self.cpu_m, "memory": self.memory}

    @classmethod
    def from_json(cls, obj: dict | None) -> "Resources":
        obj = obj or {}
        return cls(int(obj.get("cpu_m", 0)), int(obj.get("memory", 0)))


@dataclass
class DataSource:
    name: str
    url: str
    labels: dict[str, str] = field(default_factory=dict)
    node: str | None = None

    def __post_init__(self) -> None:
        if not self.name:
            raise RegistryError("data source needs a name")
        try:
            StreamEndpoint.parse(self.url)
        except ValueError as exc:
            raise RegistryError(f"data source {self.name!r}: {exc}") from exc


@dataclass
class AnalysisStepSpec:
    name: str
    ingest_selectors: list[dict[str, str]]
    workload: str
    request: Resources
    region: str | None = None
    hyperparameters: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.name:
            raise RegistryError("analysis step needs a name")
        if not self.ingest_selectors:
            raise RegistryError(f"analysis step {self.name!r} needs at least one ingest selector")
        if self.request.cpu_m <= 0 or self.request.memory < 0 or (self.request.cpu_m == 0 and self.request.memory == 0):
            raise RegistryError(f"analysis step {self.name!r} needs a positive resource request")

    def render(self, source: DataSource, node: str) -> str:
        params = ",".join(f"{k}={v}" for k, v in sorted(self.hyperparameters.items()))
        return (
            self.workload.replace("{source.url}", source.url)
            .replace("{source.name}", source.name)
            .replace("{step.name}", self.name)
            .replace("{node}", node)
            .replace("{params}", params)
        )


@dataclass
class NodeDescriptor:
    name: str
    region: str
    capacity: Resources

    def __post_init__(self) -> None:
        if not self.name:
            raise RegistryError("node needs a name")
        if self.capacity.cpu_m < 0 or self.capacity.memory < 0:
            raise RegistryError(f"node {self.name!r} capacity must be >= 0")


@dataclass(frozen=True)
class Workload:
    step: str
    source: str
    node: str
    command: str
    request: Resources

    @property
    def key(self) -> tuple[str, str]:
        return self.step, self.source

    def to_json(self) -> dict:
        return {"step": self.step, "source": self.source, "node": self.node, "command": self.command, "request": self.request.to_json()}


@dataclass
class PlacementPlan:
    assignments: dict[tuple[str, str], str] = field(default_factory=dict)
    create: list[Workload] = field(default_factory=list)
    delete: list[Workload] = field(default_factory=list)
    unschedulable: dict[str, list[str]] = field(default_factory=dict)

    @property
    def empty_diff(self) -> bool:
        return not self.create and not self.delete

    def diff_rows(self) -> list[dict]:
        rows = [{"op": "delete", **w.to_json()} for w in self.delete]
        rows += [{"op": "create", **w.to_json()} for w in self.create]
        for step, sources in sorted(self.unschedulable.items()):
            rows += [{"op": "unschedulable", "step": step, "source": s} for s in sources]
        return rows


# ---------------------------------------------------------------------------
# registry


class Registry:
    def __init__(self) -> None:
        self.sources: dict[str, DataSource] = {}
        self.steps: dict[str, AnalysisStepSpec] = {}
        self.nodes: dict[str, NodeDescriptor] = {}
        # step name -> reason, set by the last reconcile
        self.conditions: dict[str, str] = {}

    def _table(self, obj) -> dict:
        if isinstance(obj, DataSource):
            return self.sources
        if isinstance(obj, AnalysisStepSpec):
            return self.steps
        if isinstance(obj, NodeDescriptor):
            return self.nodes
        raise RegistryError(f"unsupported object {type(obj).__name__}")

    def register(self, obj) -> None:
        table = self._table(obj)
        if obj.name in table:
            raise RegistryError(f"{type(obj).__name__} {obj.name!r} already registered")
        table[obj.name] = obj

    def update(self, obj) -> None:
        table = self._table(obj)
        if obj.name not in table:
            raise RegistryError(f"unknown {type(obj).__name__} {obj.name!r}")
        table[obj.name] = obj

    def delete(self, kind: str, name: str) -> None:
        table = {"DataSource": self.sources, "AnalysisStep": self.steps, "Node": self.nodes}.get(kind)
        if table is None:
            raise RegistryError(f"unknown kind {kind!r}")
        if name not in table:
            raise RegistryError(f"unknown {kind} {name!r}")
        del table[name]

    def snapshot(self) -> "Registry":
        return copy.deepcopy(self)


def object_from_json(obj: dict):
    kind = obj.get("kind")
    if kind == "DataSource":
        return DataSource(obj["name"], obj["url"], dict(obj.get("labels", {})), obj.get("node"))
    if kind == "AnalysisStep":
        return AnalysisStepSpec(
            obj["name"],
            [dict(s) for s in obj.get("selectors", obj.get("ingest_selectors", []))],
            obj["workload"],
            Resources.from_json(obj.get("request")),
            obj.get("region"),
            {k: str(v) for k, v in obj.get("hyperparameters", {}).items()},
        )
    if kind == "Node":
        return NodeDescriptor(obj["name"], obj["region"], Resources.from_json(obj.get("capacity")))
    raise RegistryError(f"unknown object kind {kind!r}; expected one of {KINDS}")


def object_to_json(obj) -> dict:
    if isinstance(obj, DataSource):
        return {"kind": "DataSource", "name": obj.name, "url": obj.url, "labels": obj.labels, "node": obj.node}
    if isinstance(obj, AnalysisStepSpec):
        return {
            "kind": "AnalysisStep", "name": obj.name, "selectors": obj.ingest_selectors, "workload": obj.workload,
            "request": obj.request.to_json(), "region": obj.region, "hyperparameters": obj.hyperparameters,
        }
    if isinstance(obj, NodeDescriptor):
        return {"kind": "Node", "name": obj.name, "region": obj.region, "capacity": obj.capacity.to_json()}
    raise RegistryError(f"unsupported object {type(obj).__name__}")


def load_objects(directory: str | Path) -> Registry:
    reg = Registry()
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"objects directory not found: {directory}")
    for path in sorted(directory.glob("*.ndjson")):
        for row in read_ndjson(path):
            reg.register(object_from_json(row))
    return reg


# ---------------------------------------------------------------------------
# matching, placement, reconciliation


def selector_matches(selector: dict[str, str], labels: dict[str, str]) -> bool:
    return all(labels.get(k) == v for k, v in selector.items())


def match_sources(step: AnalysisStepSpec, registry: Registry) -> list[DataSource]:
    return [
        registry.sources[name]
        for name in sorted(registry.sources)
        if any(selector_matches(sel, registry.sources[name].labels) for sel in step.ingest_selectors)
    ]


def candidate_nodes(step: AnalysisStepSpec, source: DataSource, nodes: dict[str, NodeDescriptor], free: dict[str, Resources]) -> list[str]:
    permitted = [n for n in sorted(nodes) if step.region is None or nodes[n].region == step.region]
    home = nodes.get(source.node) if source.node else None
    order: list[str] = []
    if home is not None and home.name in permitted:
        order.append(home.name)
    rest = [n for n in permitted if n not in order]
    by_free = lambda n: (-free[n].cpu_m, n)  # noqa: E731
    if home is not None:
        order += sorted((n for n in rest if nodes[n].region == home.region), key=by_free)
    order += sorted((n for n in rest if n not in order), key=by_free)
    return order


def place(step: AnalysisStepSpec, source: DataSource, nodes: dict[str, NodeDescriptor], free: dict[str, Resources]) -> str | None:
    """First candidate that fits; decrements ``free`` on success."""
    for n in candidate_nodes(step, source, nodes, free):
        if free[n].fits(step.request):
            free[n] = free[n] - step.request
            return n
    return None


def _still_valid(w: Workload, reg: Registry) -> bool:
    step = reg.steps.get(w.step)
    src = reg.sources.get(w.source)
    node = reg.nodes.get(w.node)
    if step is None or src is None or node is None:
        return False
    if not any(selector_matches(sel, src.labels) for sel in step.ingest_selectors):
        return False
    if step.region is not None and node.region != step.region:
        return False
    return w.request == step.request and w.command == step.render(src, w.node)


def reconcile(registry: Registry, running: Iterable[Workload]) -> PlacementPlan:
    """Diff desired (step, source) pairs against running workloads. Pure and deterministic."""
    plan = PlacementPlan()
    running = sorted(running, key=lambda w: w.key)
    free = {n: node.capacity for n, node in registry.nodes.items()}
    kept: list[Workload] = []
    for w in running:
        if not _still_valid(w, registry):
            plan.delete.append(w)
            continue
        if free[w.node].fits(w.request):
            free[w.node] = free[w.node] - w.request
            kept.append(w)
        else:
            # node capacity shrank below what is already placed there
            plan.delete.append(w)
    kept_keys = {w.key for w in kept}
    for w in kept:
        plan.assignments[w.key] = w.node
    conditions: dict[str, str] = {}
    for step_name in sorted(registry.steps):
        step = registry.steps[step_name]
        for src in match_sources(step, registry):
            key = (step_name, src.name)
            if key in kept_keys:
                continue
            node = place(step, src, registry.nodes, free)
            if node is None:
                plan.unschedulable.setdefault(step_name, []).append(src.name)
                continue
            plan.assignments[key] = node
            plan.create.append(Workload(step_name, src.name, node, step.render(src, node), step.request))
    for step_name, sources in plan.unschedulable.items():
        conditions[step_name] = f"unschedulable: no feasible node for {', '.join(sources)}"
    registry.conditions = conditions
    return plan


# ---------------------------------------------------------------------------
# execution


class Executor:
    """Applies plans. Dry-run records the commands instead of spawning them."""

    def __init__(self, dry_run: bool = True):
        self.dry_run = dry_run
        self.running: dict[tuple[str, str], Workload] = {}
        self.log: list[tuple[str, Workload]] = []
        self._procs: dict[tuple[str, str], subprocess.Popen] = {}

    def apply(self, plan: PlacementPlan) -> None:
        for w in plan.delete:
            self.log.append(("delete", w))
            self.running.pop(w.key, None)
            proc = self._procs.pop(w.key, None)
            if proc is not None and proc.poll() is None:
                proc.terminate()
        for w in plan.create:
            self.log.append(("create", w))
            self.running[w.key] = w
            if not self.dry_run:
                try:
                    self._procs[w.key] = subprocess.Popen(shlex.split(w.command))
                except OSError as exc:
                    log.error("could not start %s/%s: %s", w.step, w.source, exc)

    def shutdown(self) -> None:
        for proc in self._procs.values():
            if proc.poll() is None:
                proc.terminate()
        for proc in self._procs.values():
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
        self._procs.clear()


Mutation = Callable[[Registry], None]


class Operator:
    """Serialized mutation queue plus a periodic reconcile tick."""

    def __init__(self, registry: Registry | None = None, executor: Executor | None = None, tick: float = 2.0):
        self.registry = registry or Registry()
        self.executor = executor or Executor(dry_run=True)
        self.tick = tick
        self.plans: list[PlacementPlan] = []
        self.rejected: list[str] = []
        self._mutations: queue.SimpleQueue[Mutation] = queue.SimpleQueue()
        self._lock = threading.Lock()

    def submit(self, mutation: Mutation) -> None:
        self._mutations.put(mutation)

    def register(self, obj) -> None:
        self.submit(lambda r: r.register(obj))

    def update(self, obj) -> None:
        self.submit(lambda r: r.update(obj))

    def delete(self, kind: str, name: str) -> None:
        self.submit(lambda r: r.delete(kind, name))

    def snapshot(self) -> Registry:
        with self._lock:
            return self.registry.snapshot()

    def step(self) -> PlacementPlan:
        """Apply queued mutations, reconcile once and apply the plan."""
        with self._lock:
            while True:
                try:
                    m = self._mutations.get_nowait()
                except queue.Empty:
                    break
                try:
                    m(self.registry)
                except RegistryError as exc:
                    log.warning("mutation rejected: %s", exc)
                    self.rejected.append(str(exc))
            plan = reconcile(self.registry, self.executor.running.values())
            self.executor.apply(plan)
        self.plans.append(plan)
        return plan

    def run(self, stop: threading.Event, on_plan: Callable[[PlacementPlan], None] | None = None) -> None:
        while True:
            plan = self.step()
            if on_plan is not None:
                on_plan(plan)
            if stop.wait(self.tick):
                return


def sync_from_objects(op: Operator, desired: Registry) -> None:
    """Queue the mutations that turn the operator's registry into ``desired``."""
    current = op.snapshot()
    for kind, cur, want in (
        ("Node", current.nodes, desired.nodes),
        ("DataSource", current.sources, desired.sources),
        ("AnalysisStep", current.steps, desired.steps),
    ):
        for name in sorted(cur):
            if name not in want:
                op.delete(kind, name)
        for name in sorted(want):
            if name not in cur:
                op.register(want[name])
            elif cur[name] != want[name]:
                op.update(want[name])


def dump_plan(plan: PlacementPlan, fh) -> None:
    for row in plan.diff_rows():
        fh.write(json.dumps(row, separators=(",", ":")) + "\n")
