"""Time-based root-cause ranking over sessionized anomaly events."""

from __future__ import annotations

import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ._util import read_ndjson
from .detectors.iftm import AnomalyEvent

log = logging.getLogger(__name__)

NS = 1_000_000_000
DEFAULT_GAP_NS = 30 * NS
DEFAULT_LATENESS_NS = 5 * NS
EDGE_KINDS = ("horizontal", "vertical")


@dataclass
class DependencyModel:
    """Components and directed ``depends-on`` edges (``frm`` depends on ``to``)."""

    components: set[str] = field(default_factory=set)
    edges: list[tuple[str, str, str]] = field(default_factory=list)

    def add_component(self, name: str) -> None:
        self.components.add(name)

    def add_edge(self, frm: str, to: str, kind: str = "vertical") -> None:
        if kind not in EDGE_KINDS:
            raise ValueError(f"edge kind must be one of {EDGE_KINDS}, got {kind!r}")
        for c in (frm, to):
            if c not in self.components:
                raise ValueError(f"edge references unknown component {c!r}")
        self.edges.append((frm, to, kind))

    def dependents(self, component: str) -> set[str]:
        """Every component that depends on ``component``, directly or transitively."""
        rev: dict[str, list[str]] = {}
        for frm, to, _ in self.edges:
            rev.setdefault(to, []).append(frm)
        seen: set[str] = set()
        todo = deque(rev.get(component, ()))
        while todo:
            c = todo.popleft()
            if c in seen:
                continue
            seen.add(c)
            todo.extend(rev.get(c, ()))
        seen.discard(component)
        return seen

    @classmethod
    def load(cls, path: str | Path) -> "DependencyModel":
        model = cls()
        rows = list(read_ndjson(path))
        for row in rows:
            if "component" in row:
                model.add_component(str(row["component"]))
        for row in rows:
            if "edge" in row:
                e = row["edge"]
                model.add_edge(e["from"], e["to"], e.get("kind", "vertical"))
        return model

    def to_rows(self) -> list[dict]:
        rows: list[dict] = [{"component": c} for c in sorted(self.components)]
        rows += [{"edge": {"from": f, "to": t, "kind": k}} for f, t, k in self.edges]
        return rows


@dataclass
class Incident:
    events: list[AnomalyEvent] = field(default_factory=list)

    @property
    def t_start(self) -> int:
        return min(e.timestamp for e in self.events)

    @property
    def t_end(self) -> int:
        return max(e.timestamp for e in self.events)

    @property
    def window(self) -> tuple[int, int]:
        return self.t_start, self.t_end

    @property
    def id(self) -> str:
        return f"incident-{self.t_start}"

    @property
    def onsets(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.events:
            if e.component not in out or e.timestamp < out[e.component]:
                out[e.component] = e.timestamp
        return out

    def events_of(self, component: str) -> list[AnomalyEvent]:
        return [e for e in self.events if e.component == component]


@dataclass
class RootCauseVerdict:
    incident_id: str
    ranking: list[str]
    onsets: dict[str, int]
    window: tuple[int, int]

    def to_json(self) -> dict:
        return {
            "incident_id": self.incident_id,
            "ranking": list(self.ranking),
            "onsets": dict(self.onsets),
            "window": list(self.window),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RootCauseVerdict":
        window = obj.get("window") or [min(obj["onsets"].values()), max(obj["onsets"].values())]
        return cls(obj["incident_id"], list(obj["ranking"]), {k: int(v) for k, v in obj["onsets"].items()}, tuple(window))


def rank_root_causes(incident: Incident, deps: DependencyModel | None = None) -> list[str]:
    """Earliest onset first; ties go to the component more of the incident depends on, then name."""
    onsets = incident.onsets
    members = set(onsets)
    deps = deps or DependencyModel()

    def depth(c: str) -> int:
        return len(deps.dependents(c) & members)

    return sorted(onsets, key=lambda c: (onsets[c], -depth(c), c))


def verdict_for(incident: Incident, deps: DependencyModel | None = None) -> RootCauseVerdict:
    return RootCauseVerdict(incident.id, rank_root_causes(incident, deps), incident.onsets, incident.window)


class RcaProcessor:
    """Gap-based sessionization with a lateness bound.

    An event joins every open incident it lies within ``gap`` of (merging
    them when it bridges two), otherwise it opens a new one. An incident is
    closed once the watermark (latest event time seen) passes
    ``t_end + gap + lateness``: no admissible event can still reach it.
    """

    def __init__(self, deps: DependencyModel | None = None, gap_ns: int = DEFAULT_GAP_NS, lateness_ns: int = DEFAULT_LATENESS_NS):
        if gap_ns <= 0 or lateness_ns < 0:
            raise ValueError("gap must be > 0 and lateness >= 0")
        self.deps = deps or DependencyModel()
        self.gap = int(gap_ns)
        self.lateness = int(lateness_ns)
        self.watermark: int | None = None
        self.open: list[Incident] = []
        self.dropped = 0
        self.closed_incidents: dict[str, Incident] = {}
        self._lock = threading.Lock()

    def ingest(self, event: AnomalyEvent) -> list[RootCauseVerdict]:
        """Add one event; return verdicts for incidents this closes."""
        with self._lock:
            ts = event.timestamp
            if self.watermark is not None and ts < self.watermark - self.lateness:
                self.dropped += 1
                log.warning("dropped late event from %s at %d (watermark %d)", event.component, ts, self.watermark)
                return []
            hits = [i for i in self.open if i.t_start - self.gap <= ts <= i.t_end + self.gap]
            if hits:
                target = hits[0]
                merged = {id(o) for o in hits[1:]}
                for other in hits[1:]:
                    target.events.extend(other.events)
                self.open = [i for i in self.open if id(i) not in merged]
                target.events.append(event)
            else:
                self.open.append(Incident([event]))
            self.watermark = ts if self.watermark is None else max(self.watermark, ts)
            return self._close(self.watermark)

    def advance(self, now_ns: int) -> list[RootCauseVerdict]:
        """Move the watermark forward without an event (e.g. on a timer)."""
        with self._lock:
            self.watermark = now_ns if self.watermark is None else max(self.watermark, now_ns)
            return self._close(self.watermark)

    def flush(self) -> list[RootCauseVerdict]:
        with self._lock:
            return self._close(None)

    def _close(self, watermark: int | None) -> list[RootCauseVerdict]:
        done = [i for i in self.open if watermark is None or watermark > i.t_end + self.gap + self.lateness]
        if not done:
            return []
        ids = {id(i) for i in done}
        self.open = [i for i in self.open if id(i) not in ids]
        done.sort(key=lambda i: i.t_start)
        out = []
        for inc in done:
            self.closed_incidents[inc.id] = inc
            out.append(verdict_for(inc, self.deps))
        return out

    def incident(self, incident_id: str) -> Incident:
        return self.closed_incidents[incident_id]

    def run(self, events: Iterable[AnomalyEvent]) -> list[RootCauseVerdict]:
        out = []
        for e in events:
            out.extend(self.ingest(e))
        out.extend(self.flush())
        return out
