"""Arrival schedules from rate traces, and open-loop HTTP replay."""
from __future__ import annotations

import asyncio
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

import aiohttp
import numpy as np

logger = logging.getLogger(__name__)

BUILTIN_TRACES = ("wc", "t4", "t5")
RUN_LOG_COLUMNS = ["send_ts_ms", "status", "latency_ms", "cause", "batch_size"]


@dataclass(frozen=True)
class RateTrace:
    """Piecewise-constant arrival rate: ``points[i][1]`` rps holds from
    ``points[i][0]`` seconds until the next point (or ``duration``)."""

    points: Tuple[Tuple[float, float], ...]
    duration: float

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("trace has no points")
        ts = [t for t, _ in self.points]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("trace times must be strictly increasing")
        if any(r < 0 for _, r in self.points):
            raise ValueError("trace rates must be non-negative")
        if self.duration <= ts[-1]:
            raise ValueError("duration must extend past the last trace point")

    @property
    def rates(self) -> List[float]:
        return [r for _, r in self.points]

    @property
    def max_rate(self) -> float:
        return max(self.rates)

    def segments(self):
        pts = self.points
        for i, (t, r) in enumerate(pts):
            end = pts[i + 1][0] if i + 1 < len(pts) else self.duration
            yield t, end, r

    def rate_at(self, t_seconds: float) -> float:
        for start, end, r in self.segments():
            if start <= t_seconds < end:
                return r
        return 0.0


def constant_trace(rate_rps: float, duration_s: float) -> RateTrace:
    return RateTrace(((0.0, float(rate_rps)),), float(duration_s))


def make_trace(points: Sequence[Tuple[float, float]], duration: Optional[float] = None) -> RateTrace:
    pts = tuple((float(t), float(r)) for t, r in points)
    if duration is None:
        # assume uniform spacing: the last point lasts as long as the one before
        step = pts[-1][0] - pts[-2][0] if len(pts) > 1 else 1.0
        duration = pts[-1][0] + step
    return RateTrace(pts, float(duration))


def load_trace_csv(path: Union[str, Path], duration: Optional[float] = None) -> RateTrace:
    """Read a ``t_seconds,rate_rps`` CSV, or a built-in trace name."""
    if str(path) in BUILTIN_TRACES:
        text = resources.files("batchgate").joinpath("traces").joinpath(f"{path}.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = csv.DictReader(line for line in text.splitlines() if not line.startswith("#"))
    points = [(float(r["t_seconds"]), float(r["rate_rps"])) for r in rows]
    return make_trace(points, duration)


def write_trace_csv(trace: RateTrace, path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_seconds", "rate_rps"])
        for t, r in trace.points:
            w.writerow([f"{t:g}", f"{r:.6g}"])


def scale_trace(trace: RateTrace, max_rps: float) -> RateTrace:
    if max_rps <= 0:
        raise ValueError("max_rps must be positive")
    peak = trace.max_rate
    if peak <= 0:
        raise ValueError("cannot scale an all-zero trace")
    k = max_rps / peak
    points = tuple((t, max_rps if r == peak else r * k) for t, r in trace.points)
    return RateTrace(points, trace.duration)


@dataclass(frozen=True)
class TraceSchedule:
    arrivals: Tuple[float, ...]  # ms from start, non-decreasing
    source: str
    seed: int

    def __len__(self) -> int:
        return len(self.arrivals)


def generate_arrivals(trace: RateTrace, seed: int) -> TraceSchedule:
    """Inhomogeneous Poisson arrivals, piecewise constant over the trace."""
    rng = np.random.default_rng(seed)
    out: List[float] = []
    for start, end, rate in trace.segments():
        if rate <= 0:
            continue
        t = start
        # draw gaps in chunks sized to the expected count
        while True:
            n = max(16, int((end - t) * rate * 1.2) + 8)
            gaps = rng.exponential(1.0 / rate, size=n)
            times = t + np.cumsum(gaps)
            inside = times[times < end]
            out.extend((inside * 1000.0).tolist())
            if len(inside) < n:
                break
            t = float(times[-1])
    desc = f"trace(max_rps={trace.max_rate:g}, duration={trace.duration:g}s)"
    return TraceSchedule(tuple(out), desc, seed)


def poisson_schedule(rate_rps: float, duration_s: float, seed: int) -> TraceSchedule:
    sched = generate_arrivals(constant_trace(rate_rps, duration_s), seed)
    return TraceSchedule(sched.arrivals, f"poisson(rate={rate_rps:g})", seed)


@dataclass
class RunRow:
    send_ts_ms: float
    status: int  # 0 for transport failures
    latency_ms: float
    cause: str = ""
    batch_size: str = ""
    scheduled_ms: float = field(default=0.0, repr=False)


def write_run_log(rows: Sequence[RunRow], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_LOG_COLUMNS)
        for r in rows:
            w.writerow([f"{r.send_ts_ms:.3f}", r.status, f"{r.latency_ms:.3f}", r.cause, r.batch_size])


def read_run_log(path: Union[str, Path]) -> List[RunRow]:
    with open(path, newline="") as fh:
        return [RunRow(float(r["send_ts_ms"]), int(r["status"]), float(r["latency_ms"]),
                       r.get("cause") or "", r.get("batch_size") or "")
                for r in csv.DictReader(fh)]


async def replay(schedule: TraceSchedule, target_url: str, payload: Any = None,
                 out_path: Union[str, Path, None] = None, timeout_s: float = 30.0) -> List[RunRow]:
    """Fire one POST per scheduled arrival without waiting on responses."""
    body = json.dumps([{"x": 0}] if payload is None else payload).encode()
    headers = {"Content-Type": "application/json"}
    rows: List[Optional[RunRow]] = [None] * len(schedule.arrivals)
    connector = aiohttp.TCPConnector(limit=0, force_close=False)
    timeout = aiohttp.ClientTimeout(total=timeout_s)

    async with aiohttp.ClientSession(connector=connector, timeout=timeout) as session:
        async def fire(i: int, sent: float) -> None:
            try:
                async with session.post(target_url, data=body, headers=headers) as resp:
                    await resp.read()
                    done = time.perf_counter()
                    rows[i] = RunRow((sent - t0) * 1000.0, resp.status, (done - sent) * 1000.0,
                                     resp.headers.get("X-Batchgate-Cause", ""),
                                     resp.headers.get("X-Batchgate-Batch-Size", ""))
            except (aiohttp.ClientError, asyncio.TimeoutError, OSError) as exc:
                done = time.perf_counter()
                logger.debug("request %d failed: %s", i, exc)
                rows[i] = RunRow((sent - t0) * 1000.0, 0, (done - sent) * 1000.0)
            rows[i].scheduled_ms = schedule.arrivals[i]

        tasks = []
        t0 = time.perf_counter()
        for i, at in enumerate(schedule.arrivals):
            delay = t0 + at / 1000.0 - time.perf_counter()
            if delay > 0:
                await asyncio.sleep(delay)
            tasks.append(asyncio.create_task(fire(i, time.perf_counter())))
        await asyncio.gather(*tasks)

    result = [r for r in rows if r is not None]
    if out_path is not None:
        write_run_log(result, out_path)
    return result
