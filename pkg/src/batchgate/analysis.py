"""Offline metrics: SLO violation rate, CCDF, batch-size and container stats."""
from __future__ import annotations

import asyncio
import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .backend import LatencyModel, service_time
from .loadgen import RunRow
from .monitor import nearest_rank
from .sim import SimResult, reduction


@dataclass
class RunMetrics:
    slo_target_ms: float
    requests: int
    slo_violation_pct: float
    p95_e2e_ms: float
    avg_batch_size: Optional[float]
    avg_containers: Optional[float]
    ccdf: List[Tuple[float, float]]
    timeline: List[dict] = field(default_factory=list)
    series: List[dict] = field(default_factory=list)

    def ccdf_at(self, latency_ms: float) -> float:
        return ccdf_at(self.ccdf, latency_ms)


def ccdf_points(latencies: Sequence[float]) -> List[Tuple[float, float]]:
    """(x, P[L > x]) at every distinct observed latency, ascending."""
    xs = np.sort(np.asarray(latencies, dtype=float))
    n = len(xs)
    values, first = np.unique(xs, return_index=True)
    # count strictly above x = n - (index just past the last copy of x)
    last = np.append(first[1:], n)
    return [(float(v), float((n - e) / n)) for v, e in zip(values, last)]


def ccdf_at(points: Sequence[Tuple[float, float]], latency_ms: float) -> float:
    frac = 1.0
    for x, f in points:
        if x <= latency_ms:
            frac = f
        else:
            break
    return frac


def _per_batch_mean(batch_sizes: Sequence[float]) -> Optional[float]:
    # each request sees its own batch's size; a batch of b appears b times
    if not batch_sizes:
        return None
    return len(batch_sizes) / sum(1.0 / b for b in batch_sizes)


def _rows_from(source) -> Tuple[List[float], List[float], List[float], List[dict], Optional[float]]:
    """(arrival_ms, e2e_ms, batch_size) per successful request."""
    if isinstance(source, SimResult):
        ok = [r for r in source.rows if not r["failed"] and r["e2e"] is not None]
        return ([r["arrival"] for r in ok], [r["e2e"] for r in ok],
                [r["batch_size"] for r in ok], source.timeline,
                source.summary.get("avg_containers"))
    rows = list(source)
    ok = [r for r in rows if isinstance(r, RunRow) and 200 <= r.status < 300]
    bs = [float(r.batch_size) for r in ok if r.batch_size not in ("", None)]
    return ([r.send_ts_ms for r in ok], [r.latency_ms for r in ok],
            bs if len(bs) == len(ok) else [], [], None)


def compute_metrics(source: Union[SimResult, Sequence[RunRow]], slo_target_ms: float,
                    percentile: float = 95.0, warmup_ms: float = 0.0,
                    bucket_ms: float = 60_000.0) -> RunMetrics:
    """Metrics over a simulator result or a load-generator run log.

    Requests arriving before ``warmup_ms`` are dropped. Violations count
    latencies strictly above the SLO target.
    """
    arrivals, e2e, bs, timeline, avg_cont = _rows_from(source)
    if warmup_ms > 0:
        keep = [i for i, a in enumerate(arrivals) if a >= warmup_ms]
        arrivals = [arrivals[i] for i in keep]
        e2e = [e2e[i] for i in keep]
        bs = [bs[i] for i in keep] if bs else []
        timeline = [p for p in timeline if p["t"] >= warmup_ms]
        if timeline:
            avg_cont = sum(p["containers"] for p in timeline) / len(timeline)
    if not e2e:
        raise ValueError("no successful requests to analyze")
    violations = sum(1 for v in e2e if v > slo_target_ms)
    return RunMetrics(
        slo_target_ms=slo_target_ms,
        requests=len(e2e),
        slo_violation_pct=100.0 * violations / len(e2e),
        p95_e2e_ms=nearest_rank(sorted(e2e), percentile),
        avg_batch_size=_per_batch_mean(bs),
        avg_containers=avg_cont,
        ccdf=ccdf_points(e2e),
        timeline=list(timeline),
        series=windowed_series(arrivals, e2e, bs, slo_target_ms, bucket_ms, percentile),
    )


@dataclass
class CharRow:
    bs: int
    mean_rt_ms: float
    relative_rt: float
    relative_per_inference: float
    linear_baseline: float


def characterize(target: Union[LatencyModel, str], bs_list: Sequence[int], repetitions: int = 10,
                 seed: int = 0) -> List[CharRow]:
    """Mean response time per batch size, relative to batch size one.

    ``target`` is a latency model, or the URL of a live ``/predict``-style
    endpoint that is timed directly.
    """
    if 1 not in bs_list:
        raise ValueError("bs_list must include 1")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if isinstance(target, LatencyModel):
        rng = np.random.default_rng(seed)
        means = {bs: float(np.mean([service_time(target, bs, rng) for _ in range(repetitions)]))
                 for bs in bs_list}
    else:
        means = asyncio.run(_time_endpoint(target, bs_list, repetitions))
    base = means[1]
    return [CharRow(bs, means[bs], means[bs] / base, means[bs] / bs / base, float(bs))
            for bs in sorted(bs_list)]


async def _time_endpoint(url: str, bs_list: Sequence[int], repetitions: int) -> dict:
    import aiohttp

    out = {}
    async with aiohttp.ClientSession() as session:
        for bs in bs_list:
            body = json.dumps([{"x": i} for i in range(bs)])
            samples = []
            for _ in range(repetitions):
                t0 = time.perf_counter()
                async with session.post(url, data=body,
                                        headers={"Content-Type": "application/json"}) as resp:
                    await resp.read()
                    resp.raise_for_status()
                samples.append((time.perf_counter() - t0) * 1000.0)
            out[bs] = float(np.mean(samples))
    return out


def write_characterization(rows: Sequence[CharRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bs", "mean_rt_ms", "relative_rt", "relative_per_inference", "linear_baseline"])
        for r in rows:
            w.writerow([r.bs, f"{r.mean_rt_ms:.4f}", f"{r.relative_rt:.6f}",
                        f"{r.relative_per_inference:.6f}", f"{r.linear_baseline:g}"])


def _fmt(v: Optional[float]) -> str:
    return "n/a" if v is None else f"{v:.6g}"


def _pct(v: Optional[float]) -> str:
    return "n/a" if v is None else f"{100.0 * v:.1f}"


def report(on: RunMetrics, off: RunMetrics, out_dir: Union[str, Path]) -> dict:
    """Write comparison.csv, summary.json and per-mode ccdf, timeline and
    series CSVs into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    red_cont = reduction(off.avg_containers, on.avg_containers)
    red_viol = reduction(off.slo_violation_pct, on.slo_violation_pct)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "off", "on", "reduction_pct"])
        w.writerow(["avg_containers", _fmt(off.avg_containers), _fmt(on.avg_containers), _pct(red_cont)])
        w.writerow(["slo_violation_pct", _fmt(off.slo_violation_pct), _fmt(on.slo_violation_pct),
                    _pct(red_viol)])
        w.writerow(["p95_e2e_ms", _fmt(off.p95_e2e_ms), _fmt(on.p95_e2e_ms), ""])
        w.writerow(["avg_batch_size", _fmt(off.avg_batch_size), _fmt(on.avg_batch_size), ""])
        w.writerow(["requests", off.requests, on.requests, ""])
    for tag, m in (("on", on), ("off", off)):
        with open(out / f"ccdf_{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["latency_ms", "fraction_exceeding"])
            w.writerows((f"{x:.3f}", f"{f:.6f}") for x, f in m.ccdf)
        with open(out / f"timeline_{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_ms", "effective_max", "containers", "in_flight"])
            w.writerows((p["t"], p["effective_max"], p["containers"], p["in_flight"])
                        for p in m.timeline)
        with open(out / f"series_{tag}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_ms", "p95_ms", "slo_miss_pct", "avg_batch_size"])
            w.writerows((p["t_ms"], f"{p['p95_ms']:.3f}", f"{p['slo_miss_pct']:.4f}",
                         _fmt(p["avg_batch_size"])) for p in m.series)
    summary = {"containers_reduction": red_cont, "violation_reduction": red_viol,
               "on": _metrics_dict(on), "off": _metrics_dict(off)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def _metrics_dict(m: RunMetrics) -> dict:
    return {"requests": m.requests, "slo_violation_pct": m.slo_violation_pct,
            "p95_e2e_ms": m.p95_e2e_ms, "avg_batch_size": m.avg_batch_size,
            "avg_containers": m.avg_containers}


def windowed_series(arrivals: Sequence[float], e2e: Sequence[float], batch_sizes: Sequence[float],
                    slo_target_ms: float, bucket_ms: float = 60_000.0,
                    percentile: float = 95.0) -> List[dict]:
    """Per-bucket p95, SLO miss rate and mean batch size, keyed by arrival time."""
    buckets: dict = {}
    for i, a in enumerate(arrivals):
        buckets.setdefault(int(a // bucket_ms), []).append(i)
    series = []
    for k in sorted(buckets):
        idx = buckets[k]
        lat = sorted(e2e[i] for i in idx)
        series.append({
            "t_ms": k * bucket_ms,
            "p95_ms": nearest_rank(lat, percentile),
            "slo_miss_pct": 100.0 * sum(1 for v in lat if v > slo_target_ms) / len(lat),
            "avg_batch_size": _per_batch_mean([batch_sizes[i] for i in idx]) if batch_sizes else None,
        })
    return series
