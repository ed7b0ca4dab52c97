"""End-to-end acceptance checks, one PASS/FAIL line per criterion."""
import asyncio
import json
import math
import random
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from batchgate import loadgen, optimizer
from batchgate.backend import LatencyModel, preset
from batchgate.config import WorkloadConfig
from batchgate.monitor import LatencyStore
from batchgate.proxy import InferenceRequest, merge_bodies, split_response
from batchgate.scheduler import BatchQueue, DispatchNow, PendingRequest, WaitUntil, on_arrival
from batchgate.sim import SimOptions, compare_runs, run_sim
from conftest import get_json, live_stack, report_criterion

CFG = WorkloadConfig(name="mnist", upstream_url="http://sim/predict", slo_target_ms=500)
# cluster capacity for the cost experiments: enough slots for the OFF run's
# peak demand (30 rps x 125 ms = 3.75 concurrent requests)
EXP_OPTIONS = SimOptions(concurrency_cap=4)
EXP_SEED = 1


def test_criterion_01_aimd_trajectory():
    t0 = time.perf_counter()
    state = optimizer.initial_state(CFG)
    seen = []
    for violation in [False] * 4 + [True] * 2 + [False]:
        state = optimizer.step(state, violation, CFG, 0.0)
        seen.append(state.effective_max)
    elapsed = time.perf_counter() - t0
    report_criterion(1, seen == [2, 3, 4, 5, 4, 3, 4] and elapsed < 1,
                     f"effective_max sequence {seen} in {elapsed * 1000:.1f} ms")


def test_criterion_02_timeout_arithmetic():
    t0 = time.perf_counter()
    q = BatchQueue()
    q.append(PendingRequest("a", 1_000.0))
    q.append(PendingRequest("b", 1_030.0))
    wait = on_arrival(q, 1_050.0, 8, 500, lambda bs: 300.0)
    armed = wait.deadline - 1_050.0 if isinstance(wait, WaitUntil) else None
    q2 = BatchQueue()
    q2.append(PendingRequest("c", 0.0))
    now = on_arrival(q2, 0.0, 8, 500, lambda bs: 520.0)
    elapsed = time.perf_counter() - t0
    ok = armed == 150.0 and isinstance(now, DispatchNow) and now.cause.value == "timeout" \
        and elapsed < 1
    report_criterion(2, ok, f"armed timeout {armed} ms; estimate 520 ms gives {now}")


def test_criterion_03_deadline_safety():
    model = LatencyModel(125, fixed_fraction=0.6, exponent=1.0, noise_cv=0)
    largest = max(bs for bs in range(1, 1000) if model.mean_ms(bs) <= CFG.slo_target_ms)
    # the window spans the whole run so the primed estimates stay exact
    cfg = CFG.replace(absolute_max_batch=largest, latency_window_ms=10**9)
    sched = loadgen.poisson_schedule(20, 600, 3)
    t0 = time.perf_counter()
    res = run_sim(cfg, model, sched, "on", 3, SimOptions(prime_monitor=True))
    elapsed = time.perf_counter() - t0
    warm = [r for r in res.rows if r["arrival"] >= cfg.optimizer_interval_ms]
    late = sum(1 for r in warm if r["e2e"] > cfg.slo_target_ms)
    peak_cap = max(p["effective_max"] for p in res.timeline)
    peak_bs = max(b["bs"] for b in res.batches)
    ok = len(sched) >= 10_000 and late == 0 and peak_cap <= largest and elapsed < 30
    report_criterion(3, ok, f"{late} of {len(warm)} post-warm-up requests over SLO "
                            f"({len(sched)} arrivals, cap <= {largest}, max cap {peak_cap}, "
                            f"max bs {peak_bs}, {elapsed:.1f} s)")


def _experiment(model):
    trace = loadgen.scale_trace(loadgen.load_trace_csv("wc"), 30)
    sched = loadgen.generate_arrivals(trace, EXP_SEED)
    t0 = time.perf_counter()
    on = run_sim(CFG, model, sched, "on", EXP_SEED, EXP_OPTIONS)
    off = run_sim(CFG, model, sched, "off", EXP_SEED, EXP_OPTIONS)
    return on, off, compare_runs(on, off), time.perf_counter() - t0


def test_criterion_04_batching_savings():
    on, off, cmp, elapsed = _experiment(preset("mnist", fixed_fraction=0.6))
    cont, viol = cmp["containers_reduction"], cmp["violation_reduction"]
    bs = cmp["on_avg_batch_size"]
    checks = {
        "containers": cont is not None and cont >= 0.40,
        "violations": viol is not None and viol >= 0.50,
        "batch size": 2 <= bs <= 16,
        "runtime": elapsed < 120,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = (f"containers {off.summary['avg_containers']:.3f} -> {on.summary['avg_containers']:.3f} "
              f"({100 * cont:.1f}% reduction, need >= 40%), violations "
              f"{off.summary['slo_violation_pct']:.3f}% -> {on.summary['slo_violation_pct']:.3f}% "
              f"({'n/a' if viol is None else f'{100 * viol:.1f}%'} reduction, need >= 50%), "
              f"avg bs {bs:.2f}, {elapsed:.0f} s" + (f"; short on: {', '.join(failed)}" if failed else ""))
    report_criterion(4, not failed, detail)


def test_criterion_05_linear_null_result():
    on, off, cmp, elapsed = _experiment(preset("mnist", fixed_fraction=0.0, exponent=1.0))
    cont = cmp["containers_reduction"]
    ok = cont is not None and abs(cont) <= 0.10 and elapsed < 120
    report_criterion(5, ok, f"containers {off.summary['avg_containers']:.3f} -> "
                            f"{on.summary['avg_containers']:.3f} ({100 * cont:+.1f}%), "
                            f"avg bs {cmp['on_avg_batch_size']:.2f}, {elapsed:.0f} s")


def _random_json(rng, depth=0):
    kind = rng.randrange(7 if depth < 2 else 5)
    if kind == 0:
        return None
    if kind == 1:
        return rng.random() < 0.5
    if kind == 2:
        return rng.randint(-10**9, 10**9)
    if kind == 3:
        return rng.uniform(-1e6, 1e6)
    if kind == 4:
        return "".join(rng.choice("abc xyzé中\"\\") for _ in range(rng.randrange(6)))
    if kind == 5:
        return [_random_json(rng, depth + 1) for _ in range(rng.randrange(4))]
    return {f"k{i}": _random_json(rng, depth + 1) for i in range(rng.randrange(4))}


def test_criterion_06_merge_split_roundtrip():
    rng = random.Random(6)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(10_000):
        bodies = [[_random_json(rng) for _ in range(rng.randint(1, 4))]
                  for _ in range(rng.randint(1, 8))]
        raw = [json.dumps(b).encode() for b in bodies]
        env = merge_bodies([InferenceRequest(json.loads(r)) for r in raw])
        upstream = json.loads(json.dumps(env.merged_body))  # identity upstream over the wire
        out = [json.dumps(s).encode() for s in split_response(env, upstream)]
        mismatches += out != raw
    elapsed = time.perf_counter() - t0
    report_criterion(6, mismatches == 0 and elapsed < 10,
                     f"{mismatches} mismatches in 10000 roundtrips, {elapsed:.1f} s")


def test_criterion_07_percentile_oracle():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    bad = 0
    for i in range(1_000):
        p = [50, 90, 95, 99][i % 4]
        n = int(rng.integers(1, 501))
        window = 10_000
        store = LatencyStore(window, percentile=p, min_samples=1)
        # some samples fall out of the window before the query
        ts = np.sort(rng.uniform(0, 3 * window, size=n + int(rng.integers(0, 200))))
        vals = rng.lognormal(5, 1, size=len(ts))
        for t, v in zip(ts, vals):
            store.record_upstream(1, float(v), float(t))
            store.record_e2e(float(v), float(t))
        now = float(ts[-1])
        live = sorted(float(v) for t, v in zip(ts, vals) if t >= now - window)
        expected = live[math.ceil(p * len(live) / 100) - 1]
        bad += store.upstream_percentile(1, now) != expected
        bad += store.e2e_percentile(now) != expected
    elapsed = time.perf_counter() - t0
    report_criterion(7, bad == 0 and elapsed < 10,
                     f"{bad} disagreements over 1000 windows, {elapsed:.1f} s")


def test_criterion_08_cli_determinism(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(CFG.to_dict()))
    outs = []
    t0 = time.perf_counter()
    for i in range(2):
        out = tmp_path / f"r{i}.json"
        subprocess.run([sys.executable, "-m", "batchgate", "--log-level", "WARNING", "sim",
                        "--config", str(cfg), "--model-preset", "mnist", "--trace", "wc",
                        "--max-rps", "30", "--mode", "on", "--seed", "8", "--out", str(out)],
                       check=True, capture_output=True, timeout=60)
        outs.append(out.read_bytes())
    elapsed = time.perf_counter() - t0
    report_criterion(8, outs[0] == outs[1] and elapsed < 60,
                     f"two runs {'byte-identical' if outs[0] == outs[1] else 'differ'} "
                     f"({len(outs[0])} bytes each, {elapsed:.1f} s)")


class _Poller(threading.Thread):
    def __init__(self, url):
        super().__init__(daemon=True)
        self.url, self.stop, self.max_seen = url, threading.Event(), 0

    def run(self):
        while not self.stop.wait(1.0):
            try:
                self.max_seen = max(self.max_seen, get_json(self.url)["effective_max"])
            except OSError:
                pass


@pytest.mark.live
def test_criterion_09_live_smoke(tmp_path):
    with live_stack(tmp_path, mode="on") as (proxy, backend, cfg):
        poller = _Poller(f"{proxy}/metrics")
        poller.start()
        out = tmp_path / "run.csv"
        subprocess.run([sys.executable, "-m", "batchgate", "--log-level", "WARNING", "loadgen",
                        "--rate", "20", "--duration", "60", "--seed", "9",
                        "--target", f"{proxy}/v1/workloads/mnist:predict", "--out", str(out)],
                       check=True, capture_output=True, timeout=150)
        poller.stop.set()
        poller.join()
        metrics = get_json(f"{proxy}/metrics")
        served = get_json(f"{backend}/stats")["instances"]
    expected = len(loadgen.poisson_schedule(20, 60, 9))
    rows = loadgen.read_run_log(out)
    ok_rows = sum(1 for r in rows if r.status == 200)
    peak = max(poller.max_seen, metrics["effective_max"])
    ok = (len(rows) == expected and ok_rows == expected
          and metrics["accepted_total"] == metrics["answered_total"] == expected
          and served == expected and peak > 1 and metrics["timeout_ratio"] is not None)
    report_criterion(9, ok, f"{ok_rows}/{expected} answered (proxy accepted "
                            f"{metrics['accepted_total']}, answered {metrics['answered_total']}, "
                            f"backend saw {served} instances), peak effective_max {peak}, "
                            f"timeout_ratio {metrics['timeout_ratio']}")


@pytest.mark.live
def test_criterion_10_proxy_overhead(tmp_path):
    with live_stack(tmp_path, mode="off", noise_cv=0.0) as (proxy, backend, cfg):
        via = loadgen.poisson_schedule(20, 60, 10)
        direct = loadgen.poisson_schedule(20, 60, 11)

        async def both():
            return await asyncio.gather(
                loadgen.replay(via, f"{proxy}/v1/workloads/mnist:predict"),
                loadgen.replay(direct, f"{backend}/predict"))

        via_rows, direct_rows = asyncio.run(both())
    p95 = lambda rows: float(np.percentile([r.latency_ms for r in rows if r.status == 200], 95))
    added = p95(via_rows) - p95(direct_rows)
    all_ok = all(r.status == 200 for r in via_rows + direct_rows)
    report_criterion(10, all_ok and added < 5.0,
                     f"p95 via proxy {p95(via_rows):.2f} ms vs direct {p95(direct_rows):.2f} ms, "
                     f"added {added:.2f} ms at bs=1")
