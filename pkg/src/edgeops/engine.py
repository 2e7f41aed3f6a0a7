"""Density-grid matching of root-cause features against an action catalogue."""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import read_ndjson
from .rca import Incident, RootCauseVerdict

log = logging.getLogger(__name__)

DEFAULT_RESOLUTION = 8
DEFAULT_FLOOR = 0.05
NEIGHBOR_WEIGHT = 0.5


@dataclass
class AnomalyFeature:
    vector: np.ndarray
    component: str
    degenerate: bool = False


def featurize(incident: Incident, verdict: RootCauseVerdict) -> AnomalyFeature:
    """Mean per-metric error of the top-ranked component's events, scaled to unit norm."""
    root = verdict.ranking[0]
    errs = np.array([e.per_metric_error for e in incident.events_of(root)], dtype=np.float64)
    if errs.size == 0:
        return AnomalyFeature(np.zeros(0), root, degenerate=True)
    mean = errs.mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if not norm > 0 or not math.isfinite(norm):
        return AnomalyFeature(np.zeros_like(mean), root, degenerate=True)
    return AnomalyFeature(mean / norm, root)


def cell_of(vector: np.ndarray, resolution: int) -> tuple[int, ...]:
    idx = np.floor((np.asarray(vector, dtype=np.float64) + 1.0) / 2.0 * resolution).astype(np.int64)
    # +1.0 exactly would land one past the last cell
    return tuple(int(i) for i in np.clip(idx, 0, resolution - 1))


@dataclass
class PatternGrid:
    action: str
    resolution: int
    cells: dict[tuple[int, ...], float]

    def __post_init__(self) -> None:
        if not self.cells or not any(d > 0 for d in self.cells.values()):
            raise ValueError("a pattern needs at least one non-empty cell")
        if any(d < 0 for d in self.cells.values()):
            raise ValueError("densities must be >= 0")

    def score(self, cell: tuple[int, ...]) -> float:
        total = 0.0
        for c, dens in self.cells.items():
            if len(c) != len(cell):
                continue
            dist = 0
            for a, b in zip(c, cell):
                dist += abs(a - b)
                if dist > 1:
                    break
            if dist == 0:
                total += dens
            elif dist == 1:
                total += NEIGHBOR_WEIGHT * dens
        return total

    def to_json(self) -> dict:
        return {
            "kind": "pattern",
            "action": self.action,
            "resolution": self.resolution,
            "cells": [[list(c), d] for c, d in sorted(self.cells.items())],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "PatternGrid":
        return cls(obj["action"], int(obj["resolution"]), {tuple(c): float(d) for c, d in obj["cells"]})


def train_pattern(features: list[AnomalyFeature] | list[np.ndarray], action: str, resolution: int = DEFAULT_RESOLUTION) -> PatternGrid:
    if not features:
        raise ValueError("train_pattern needs at least one feature")
    counts: dict[tuple[int, ...], float] = {}
    for f in features:
        vec = f.vector if isinstance(f, AnomalyFeature) else f
        c = cell_of(vec, resolution)
        counts[c] = counts.get(c, 0.0) + 1.0
    total = sum(counts.values())
    return PatternGrid(action, resolution, {c: n / total for c, n in counts.items()})


@dataclass
class ActionCatalogue:
    actions: dict[str, str] = field(default_factory=dict)
    patterns: list[PatternGrid] = field(default_factory=list)

    def __post_init__(self) -> None:
        for p in self.patterns:
            if p.action not in self.actions:
                raise ValueError(f"pattern refers to unknown action {p.action!r}")

    def add_pattern(self, pattern: PatternGrid) -> None:
        if pattern.action not in self.actions:
            raise ValueError(f"pattern refers to unknown action {pattern.action!r}")
        self.patterns.append(pattern)

    def to_rows(self) -> list[dict]:
        rows = [{"kind": "action", "id": a, "description": d} for a, d in sorted(self.actions.items())]
        return rows + [p.to_json() for p in self.patterns]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for row in self.to_rows():
                fh.write(json.dumps(row, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "ActionCatalogue":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"catalogue file not found: {path}")
        actions: dict[str, str] = {}
        patterns = []
        for row in read_ndjson(path):
            kind = row.get("kind")
            if kind == "action":
                actions[row["id"]] = row.get("description", "")
            elif kind == "pattern":
                patterns.append(PatternGrid.from_json(row))
            else:
                raise ValueError(f"{path}: unknown catalogue row kind {kind!r}")
        return cls(actions, patterns)


@dataclass(frozen=True)
class Match:
    action: str
    score: float


def grid_match(catalogue: ActionCatalogue, feature: AnomalyFeature | np.ndarray, floor: float = DEFAULT_FLOOR) -> Match | None:
    vec = feature.vector if isinstance(feature, AnomalyFeature) else np.asarray(feature)
    if isinstance(feature, AnomalyFeature) and feature.degenerate:
        return None
    best: Match | None = None
    cells: dict[int, tuple[int, ...]] = {}
    for p in catalogue.patterns:
        cell = cells.setdefault(p.resolution, cell_of(vec, p.resolution))
        s = p.score(cell)
        if best is None or s > best.score or (s == best.score and p.action < best.action):
            best = Match(p.action, s)
    if best is None or best.score < floor:
        return None
    return best


@dataclass
class RecommendedAction:
    incident_id: str
    component: str
    action: str
    score: float

    def to_json(self) -> dict:
        return {"incident_id": self.incident_id, "component": self.component, "action": self.action, "score": self.score}


def execute_action(action: RecommendedAction) -> None:
    """Remediation hook. Recommendations are not acted on; this only logs."""
    log.info("recommended %s for %s (%s, score %.3f)", action.action, action.component, action.incident_id, action.score)


class DecisionEngine:
    """Holds an immutable catalogue snapshot; ``update`` swaps it atomically."""

    def __init__(self, catalogue: ActionCatalogue, floor: float = DEFAULT_FLOOR):
        self._catalogue = catalogue
        self.floor = floor
        self.degenerate = 0
        self.unmatched = 0
        self._lock = threading.Lock()

    @property
    def catalogue(self) -> ActionCatalogue:
        return self._catalogue

    def update(self, catalogue: ActionCatalogue) -> None:
        self._catalogue = catalogue

    def decide(self, incident: Incident, verdict: RootCauseVerdict) -> RecommendedAction | None:
        feature = featurize(incident, verdict)
        if feature.degenerate:
            with self._lock:
                self.degenerate += 1
            log.warning("degenerate feature for %s; no match attempted", verdict.incident_id)
            return None
        m = grid_match(self._catalogue, feature, self.floor)
        if m is None:
            with self._lock:
                self.unmatched += 1
            return None
        rec = RecommendedAction(verdict.incident_id, feature.component, m.action, m.score)
        execute_action(rec)
        return rec


def incident_from_journal(verdict: RootCauseVerdict, events: list) -> Incident:
    """Rebuild an incident from journaled anomaly events falling in the verdict's window."""
    lo, hi = verdict.window
    members = set(verdict.onsets)
    return Incident([e for e in events if lo <= e.timestamp <= hi and e.component in members])
