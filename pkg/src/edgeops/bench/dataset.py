"""Seeded synthetic metric streams with additive level-shift faults."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..collector import METRIC_NAMES
from ..stream import MetricHeader, Sample

T0_NS = 1_600_000_000 * 10**9
STEP_NS = 500 * 10**6


@dataclass(frozen=True)
class Injection:
    """Add ``shift`` stationary standard deviations to ``metrics`` for ``duration`` samples."""

    onset: int
    duration: int
    metrics: tuple[int, ...]
    shift: float

    def __post_init__(self) -> None:
        if self.onset < 0 or self.duration < 0:
            raise ValueError("onset and duration must be >= 0")
        if not np.isfinite(self.shift):
            raise ValueError("shift must be finite")


@dataclass
class SyntheticSpec:
    n: int = 10_000
    dim: int = 28
    seed: int = 42
    injections: list[Injection] = field(default_factory=list)
    phi_range: tuple[float, float] = (0.2, 0.6)
    tags: dict[str, str] = field(default_factory=lambda: {"host": "edge1"})
    t0_ns: int = T0_NS
    step_ns: int = STEP_NS

    def __post_init__(self) -> None:
        if self.n < 0 or self.dim < 1:
            raise ValueError("n must be >= 0 and dim >= 1")
        for inj in self.injections:
            if not 0 <= inj.onset < max(self.n, 1):
                raise ValueError(f"injection onset {inj.onset} outside [0, {self.n})")
            if any(not 0 <= m < self.dim for m in inj.metrics):
                raise ValueError("injection metric index out of range")


def header_for(dim: int) -> MetricHeader:
    if dim == len(METRIC_NAMES):
        return MetricHeader(METRIC_NAMES)
    return MetricHeader([f"m{i}" for i in range(dim)])


def process_params(spec: SyntheticSpec) -> dict[str, np.ndarray]:
    """Per-metric level, AR coefficient, innovation and stationary sd."""
    rng = np.random.default_rng([spec.seed, 0])
    level = 10.0 ** rng.uniform(-1.0, 6.0, spec.dim)
    phi = rng.uniform(*spec.phi_range, spec.dim)
    sd = level * rng.uniform(0.01, 0.2, spec.dim)
    return {"level": level, "phi": phi, "noise": sd * np.sqrt(1.0 - phi * phi), "sd": sd}


def generate_matrix(spec: SyntheticSpec) -> np.ndarray:
    p = process_params(spec)
    rng = np.random.default_rng([spec.seed, 1])
    eps = rng.standard_normal((spec.n, spec.dim)) * p["noise"]
    out = np.empty((spec.n, spec.dim))
    # start from the stationary distribution, so there is no burn-in transient
    x = rng.standard_normal(spec.dim) * p["sd"]
    for t in range(spec.n):
        x = p["phi"] * x + eps[t]
        out[t] = x
    out += p["level"]
    for inj in spec.injections:
        idx = list(inj.metrics)
        out[inj.onset : inj.onset + inj.duration, idx] += inj.shift * p["sd"][idx]
    return out


def generate_dataset(spec: SyntheticSpec) -> tuple[MetricHeader, list[Sample]]:
    values = generate_matrix(spec)
    samples = [
        Sample(spec.t0_ns + i * spec.step_ns, values[i].copy(), dict(spec.tags))
        for i in range(spec.n)
    ]
    return header_for(spec.dim), samples
