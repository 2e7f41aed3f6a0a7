"""Desk-scale reproductions of the overhead and latency experiments."""

from .dataset import Injection, SyntheticSpec, generate_dataset, generate_matrix
from .harness import (
    CpuBudget,
    JitReport,
    LatencyRow,
    Throttle,
    run_budget_sweep,
    run_frequency_sweep,
    run_jit_check,
    throttled_run,
)

__all__ = [
    "CpuBudget",
    "Injection",
    "JitReport",
    "LatencyRow",
    "SyntheticSpec",
    "Throttle",
    "generate_dataset",
    "generate_matrix",
    "run_budget_sweep",
    "run_frequency_sweep",
    "run_jit_check",
    "throttled_run",
]
