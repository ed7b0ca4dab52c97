"""Regenerate the synthetic rate traces shipped in src/batchgate/traces/.

These are stand-ins shaped after the public AutoScale traces (World Cup '98
and two NLAR workloads); the original data is not bundled. Rates are
normalised to a peak of 100 rps; scale them with ``--max-rps``.
"""
import math
from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "batchgate" / "traces"
DURATION_S = 3600
STEP_S = 10


def _spike(t, at, rise, decay):
    if t < at - rise:
        return 0.0
    if t < at:
        return (t - (at - rise)) / rise
    return math.exp(-(t - at) / decay)


def world_cup(t, u):
    # slow build-up with two match-time bursts, the second one the peak
    base = 0.30 + 0.20 * (t / DURATION_S) + 0.05 * math.sin(2 * math.pi * t / 900)
    burst = 0.35 * _spike(t, 1300, 120, 300) + 0.55 * _spike(t, 2700, 90, 420)
    return max(0.0, base + burst + 0.03 * u)


def nlar_t4(t, u):
    return max(0.0, 0.55 + 0.35 * math.sin(2 * math.pi * t / 1800 - math.pi / 2) + 0.04 * u)


def nlar_t5(t, u):
    slow = 0.5 + 0.3 * math.sin(2 * math.pi * t / 3600 - math.pi / 3)
    fast = 0.12 * math.sin(2 * math.pi * t / 400)
    return max(0.0, slow + fast + 0.04 * u)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, fn, seed in (("wc", world_cup, 98), ("t4", nlar_t4, 4), ("t5", nlar_t5, 5)):
        rng = np.random.default_rng(seed)
        ts = list(range(0, DURATION_S, STEP_S))
        raw = [fn(t, float(rng.standard_normal())) for t in ts]
        peak = max(raw)
        with open(OUT / f"{name}.csv", "w") as fh:
            fh.write("# synthetic stand-in, not the original trace data\n")
            fh.write("t_seconds,rate_rps\n")
            for t, r in zip(ts, raw):
                fh.write(f"{t},{100.0 * r / peak:.4f}\n")


if __name__ == "__main__":
    main()
