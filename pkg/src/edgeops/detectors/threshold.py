from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass
class ThresholdModel:
    """Exponential moving average of reconstruction errors with a sigma band.

    The decision for an error is taken against the threshold *before* the
    error is folded in. Flagged errors never reach the baseline; the first
    ``warmup`` errors always do and are never flagged.
    """

    alpha: float = 0.1
    c: float = 3.0
    warmup: int = 50
    mu: float = 0.0
    s: float = 0.0
    count: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.c <= 0.0:
            raise ValueError(f"c must be > 0, got {self.c}")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    @property
    def threshold(self) -> float:
        return self.mu + self.c * math.sqrt(self.s)

    @property
    def warmed_up(self) -> bool:
        return self.count >= self.warmup

    def update(self, error: float) -> tuple[bool, float]:
        """Return ``(is_anomaly, threshold_used)`` and fold non-anomalous errors in."""
        if error < 0.0:
            raise ValueError(f"reconstruction error must be >= 0, got {error}")
        theta = self.threshold
        if self.warmed_up and error > theta:
            return True, theta
        if self.count == 0:
            self.mu = error
            self.s = 0.0
        else:
            # convex-combination form; mu += alpha*diff cancels badly on large jumps
            diff = error - self.mu
            self.mu = self.alpha * error + (1.0 - self.alpha) * self.mu
            self.s = self.alpha * diff * diff + (1.0 - self.alpha) * self.s
        self.count += 1
        return False, theta
