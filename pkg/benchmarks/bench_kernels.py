"""Per-sample detector cost, numba kernels vs the numpy fallback.

    python3 benchmarks/bench_kernels.py [--samples N] [--repeat R]

Each detector runs the seeded 28-metric dataset once per backend. Compilation
happens on a throwaway detector first, so timings are steady state only.
"""

from __future__ import annotations

import argparse
import time

from edgeops._accel import HAVE_NUMBA
from edgeops.bench import SyntheticSpec, generate_matrix
from edgeops.bench.harness import warm_kernels
from edgeops.detectors import Detector


def bench(algorithm, backend, data, repeat):
    best = float("inf")
    for _ in range(repeat):
        det = Detector(algorithm, data.shape[1], backend=backend)
        t0 = time.perf_counter()
        for x in data:
            det.score(x)
        best = min(best, time.perf_counter() - t0)
    return best / len(data) * 1e6


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=10_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    data = generate_matrix(SyntheticSpec(n=args.samples, seed=42))
    backends = ["numpy"] + (["numba"] if HAVE_NUMBA else [])
    if not HAVE_NUMBA:
        print("numba not importable; numpy only")
    for b in backends:
        warm_kernels(("birch", "arima", "rnn"), data.shape[1], b)

    print(f"{'detector':<8} " + " ".join(f"{b + ' us':>12}" for b in backends) + ("     speedup" if len(backends) == 2 else ""))
    for algo in ("birch", "arima", "rnn"):
        us = [bench(algo, b, data, args.repeat) for b in backends]
        line = f"{algo:<8} " + " ".join(f"{u:12.2f}" for u in us)
        if len(us) == 2:
            line += f"  {us[0] / us[1]:9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
