"""Deterministic discrete-event simulation of the batching proxy.

The simulator drives the same monitor, scheduler and optimizer functions as
the live proxy, in virtual milliseconds, against a ``LatencyModel`` upstream.
"""
from __future__ import annotations

import csv
import heapq
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Deque, Dict, List, Optional, Union

import numpy as np

from . import optimizer, scheduler
from .backend import AutoscalerState, LatencyModel, service_time
from .config import WorkloadConfig
from .loadgen import TraceSchedule
from .monitor import Cause, LatencyStore, nearest_rank

MODES = ("on", "off")

ARRIVAL = "arrival"
QUEUE_TIMEOUT = "queue_timeout"
BATCH_COMPLETE = "batch_complete"
OPTIMIZER_TICK = "optimizer_tick"
AUTOSCALER_TICK = "autoscaler_tick"


@dataclass(frozen=True)
class SimOptions:
    """Harness knobs that are not part of the proxy's configuration.

    ``capacity="unbounded"`` admits every batch at once (serverless
    assumption). ``"autoscaled"`` lets at most ``containers *
    target_concurrency`` batches run, queueing the rest FIFO, with the
    container count refreshed every ``tick_ms`` from the windowed in-flight
    average. ``concurrency_cap`` imposes a fixed limit instead.
    """

    capacity: str = "unbounded"
    concurrency_cap: Optional[int] = None
    target_concurrency: int = 1
    target_utilization: float = 1.0
    autoscaler_window_ms: float = 60_000.0
    tick_ms: float = 2_000.0
    prime_monitor: bool = False
    warmup_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.capacity not in ("unbounded", "autoscaled"):
            raise ValueError(f"unknown capacity model {self.capacity!r}")
        if self.concurrency_cap is not None and self.concurrency_cap < 1:
            raise ValueError("concurrency_cap must be >= 1")
        if self.tick_ms <= 0:
            raise ValueError("tick_ms must be positive")


@dataclass(frozen=True)
class SimEvent:
    time: float
    sequence: int
    kind: str
    data: Any = None

    def __lt__(self, other: "SimEvent") -> bool:
        return (self.time, self.sequence) < (other.time, other.sequence)


@dataclass
class SimResult:
    rows: List[dict]
    timeline: List[dict]
    batches: List[dict]
    summary: dict
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"meta": self.meta, "summary": self.summary, "timeline": self.timeline,
                "batches": self.batches, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def write(self, json_path: Union[str, Path], csv_path: Union[str, Path, None] = None) -> None:
        Path(json_path).write_text(self.to_json())
        if csv_path is not None:
            write_rows_csv(self.rows, csv_path)

    @classmethod
    def from_dict(cls, d: dict) -> "SimResult":
        return cls(d["rows"], d["timeline"], d["batches"], d["summary"], d.get("meta", {}))

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SimResult":
        return cls.from_dict(json.loads(Path(path).read_text()))


ROW_COLUMNS = ["id", "arrival", "dispatch", "completion", "e2e", "batch_size", "cause", "failed"]


def write_rows_csv(rows: List[dict], path: Union[str, Path]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ROW_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in ROW_COLUMNS})


class _Run:
    def __init__(self, cfg: WorkloadConfig, model: LatencyModel, schedule: TraceSchedule,
                 mode: str, seed: int, opts: SimOptions):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.cfg, self.model, self.schedule, self.mode, self.opts = cfg, model, schedule, mode, opts
        # one stream per component so toggling one leaves the others intact
        noise_seq, _spare = np.random.SeedSequence(seed).spawn(2)
        self.noise_rng = np.random.default_rng(noise_seq)
        self.store = LatencyStore.from_config(cfg)
        self.queue = scheduler.BatchQueue()
        self.aimd = optimizer.initial_state(cfg, 0.0)
        self.autoscaler = AutoscalerState(opts.target_concurrency, opts.autoscaler_window_ms, 0.0,
                                          opts.target_utilization)
        self.containers = 1
        self.running = 0
        self.waiting: Deque[int] = deque()
        self.events: List[SimEvent] = []
        self.seq = 0
        self.now = 0.0
        self.rows: List[dict] = []
        self.batches: List[dict] = []
        self.timeline: List[dict] = []
        self.next_arrival = 0

    @property
    def max_bs(self) -> int:
        return 1 if self.mode == "off" else self.aimd.effective_max

    def push(self, t: float, kind: str, data: Any = None) -> None:
        if t < self.now:
            raise RuntimeError(f"event {kind} scheduled in the past ({t} < {self.now})")
        self.seq += 1
        heapq.heappush(self.events, SimEvent(t, self.seq, kind, data))

    def lookup(self, bs: int) -> Optional[float]:
        return self.store.upstream_percentile(bs, self.now)

    def capacity(self) -> float:
        if self.opts.concurrency_cap is not None:
            return self.opts.concurrency_cap
        if self.opts.capacity == "autoscaled":
            return self.containers * self.opts.target_concurrency
        return math.inf

    # -- event handlers ----------------------------------------------------
    def on_arrival(self, rid: int) -> None:
        self.queue.append(scheduler.PendingRequest(rid, self.now))
        self.settle()

    def on_queue_timeout(self, version: int) -> None:
        decision = scheduler.on_timeout(self.queue, self.now, version)
        if decision is not None:
            self.settle(decision)

    def settle(self, first: Optional[scheduler.DispatchNow] = None) -> None:
        batches, wait = scheduler.settle(self.queue, self.now, self.max_bs, self.cfg.slo_target_ms,
                                         self.lookup, first=first)
        for members, cause in batches:
            self.dispatch([m.payload for m in members], cause)
        if wait is not None:
            self.push(wait.deadline, QUEUE_TIMEOUT, wait.version)

    def dispatch(self, rids: List[int], cause: Cause) -> None:
        self.store.record_dispatch(cause, self.now)
        bid = len(self.batches)
        self.batches.append({"id": bid, "dispatch": self.now, "start": None, "completion": None,
                             "bs": len(rids), "cause": cause.value, "members": rids})
        for rid in rids:
            row = self.rows[rid]
            row["dispatch"] = self.now
            row["batch_size"] = len(rids)
            row["cause"] = cause.value
        self.autoscaler.begin(self.now)
        self.waiting.append(bid)
        self.start_waiting()

    def start_waiting(self) -> None:
        cap = self.capacity()
        while self.waiting and self.running < cap:
            bid = self.waiting.popleft()
            batch = self.batches[bid]
            batch["start"] = self.now
            self.running += 1
            latency = service_time(self.model, batch["bs"], self.noise_rng)
            self.push(self.now + latency, BATCH_COMPLETE, bid)

    def on_batch_complete(self, bid: int) -> None:
        batch = self.batches[bid]
        batch["completion"] = self.now
        self.running -= 1
        self.autoscaler.end(self.now)
        self.store.record_upstream(batch["bs"], self.now - batch["dispatch"], self.now)
        for rid in batch["members"]:
            row = self.rows[rid]
            row["completion"] = self.now
            row["e2e"] = self.now - row["arrival"]
            self.store.record_e2e(row["e2e"], self.now)
        self.start_waiting()

    def on_optimizer_tick(self, _data: Any) -> None:
        snap = self.store.snapshot(self.now)
        before = self.aimd.effective_max
        self.aimd = optimizer.step(self.aimd, optimizer.check_violation(snap, self.cfg),
                                   self.cfg, self.now)
        if self.aimd.effective_max < before and self.queue.pending:
            self.settle()
        self.push(self.now + self.cfg.optimizer_interval_ms, OPTIMIZER_TICK)

    def on_autoscaler_tick(self, _data: Any) -> None:
        self.containers = self.autoscaler.container_count(self.now)
        self.timeline.append({"t": self.now, "effective_max": self.max_bs,
                              "containers": self.containers,
                              "in_flight": self.autoscaler.in_flight})
        self.start_waiting()
        if self.more_work():
            self.push(self.now + self.opts.tick_ms, AUTOSCALER_TICK)

    def more_work(self) -> bool:
        return self.next_arrival < len(self.schedule.arrivals) or bool(self.queue.pending) \
            or bool(self.waiting) or self.running > 0

    # -- driver ------------------------------------------------------------
    def run(self) -> SimResult:
        arrivals = self.schedule.arrivals
        for rid, t in enumerate(arrivals):
            self.rows.append({"id": rid, "arrival": float(t), "dispatch": None,
                              "completion": None, "e2e": None, "batch_size": None,
                              "cause": None, "failed": False})
        if self.opts.prime_monitor:
            for bs in range(1, self.cfg.absolute_max_batch + 2):
                for _ in range(self.cfg.min_samples):
                    self.store.record_upstream(bs, self.model.mean_ms(bs), 0.0)
        # arrivals are fed lazily to keep the heap small
        self.next_arrival = 0
        if arrivals:
            if self.mode == "on":
                self.push(float(self.cfg.optimizer_interval_ms), OPTIMIZER_TICK)
            self.push(0.0, AUTOSCALER_TICK)
        handlers = {QUEUE_TIMEOUT: self.on_queue_timeout, BATCH_COMPLETE: self.on_batch_complete,
                    OPTIMIZER_TICK: self.on_optimizer_tick, AUTOSCALER_TICK: self.on_autoscaler_tick}
        n = len(arrivals)
        while True:
            i = self.next_arrival
            if i < n and (not self.events or arrivals[i] <= self.events[0].time):
                # arrivals win ties: they were all known before any event was queued
                self.now = float(arrivals[i])
                self.next_arrival += 1
                self.on_arrival(i)
                continue
            if not self.events or not self.more_work():
                break
            ev = heapq.heappop(self.events)
            self.now = ev.time
            handlers[ev.kind](ev.data)
        return self.result()

    def result(self) -> SimResult:
        summary = summarize(self.rows, self.batches, self.timeline, self.cfg.slo_target_ms,
                            self.cfg.slo_percentile, self.opts.warmup_ms)
        meta = {"mode": self.mode, "workload": self.cfg.name, "model": asdict(self.model),
                "schedule": self.schedule.source, "arrivals": len(self.schedule.arrivals),
                "options": asdict(self.opts), "end_time": self.now}
        return SimResult(self.rows, self.timeline, [
            {k: v for k, v in b.items() if k != "members"} for b in self.batches], summary, meta)


def summarize(rows: List[dict], batches: List[dict], timeline: List[dict], slo_target_ms: float,
              percentile: float = 95.0, warmup_ms: float = 0.0) -> dict:
    kept = [r for r in rows if r["arrival"] >= warmup_ms and not r["failed"] and r["e2e"] is not None]
    e2e = sorted(r["e2e"] for r in kept)
    bss = [b["bs"] for b in batches if b["dispatch"] >= warmup_ms]
    conts = [p["containers"] for p in timeline if p["t"] >= warmup_ms]
    return {
        "requests": len(kept),
        "failures": sum(1 for r in rows if r["failed"]),
        "slo_violation_pct": 100.0 * sum(1 for v in e2e if v > slo_target_ms) / len(e2e) if e2e else 0.0,
        "avg_containers": sum(conts) / len(conts) if conts else 0.0,
        "avg_batch_size": sum(bss) / len(bss) if bss else 0.0,
        "p95_e2e": nearest_rank(e2e, percentile) if e2e else None,
        "batches": len(bss),
    }


def run_sim(cfg: WorkloadConfig, model: LatencyModel, schedule: TraceSchedule,
            mode: str = "on", seed: int = 0,
            options: Optional[SimOptions] = None) -> SimResult:
    """Simulate one experiment; identical inputs give identical results."""
    return _Run(cfg, model, schedule, mode, seed, options or SimOptions()).run()


def reduction(off: Optional[float], on: Optional[float]) -> Optional[float]:
    """Relative reduction ``1 - on/off``; None when ``off`` is zero or absent."""
    if off is None or on is None or off == 0:
        return None
    return 1.0 - on / off


def compare_runs(on: Union[SimResult, dict], off: Union[SimResult, dict]) -> Dict[str, Optional[float]]:
    s_on = on.summary if isinstance(on, SimResult) else on
    s_off = off.summary if isinstance(off, SimResult) else off
    return {
        "containers_reduction": reduction(s_off["avg_containers"], s_on["avg_containers"]),
        "violation_reduction": reduction(s_off["slo_violation_pct"], s_on["slo_violation_pct"]),
        "on_avg_batch_size": s_on["avg_batch_size"],
        "off_avg_batch_size": s_off["avg_batch_size"],
    }
