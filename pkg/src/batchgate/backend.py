"""Mock model-serving upstream and a concurrency-based container emulator.

Batch latency follows an affine-plus-power law::

    T(bs) = base * fixed_fraction + base * (1 - fixed_fraction) * bs ** exponent

scaled by mean-one lognormal noise. ``fixed_fraction=0, exponent=1`` is the
linear workload that gains nothing from batching.
"""
from __future__ import annotations

import asyncio
import bisect
import logging
import math
import time
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from aiohttp import web

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LatencyModel:
    base_ms: float
    fixed_fraction: float = 0.6
    exponent: float = 1.0
    noise_cv: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.base_ms <= 0:
            raise ValueError("base_ms must be positive")
        if not 0 <= self.fixed_fraction <= 1:
            raise ValueError("fixed_fraction must be in [0, 1]")
        if not 0 < self.exponent <= 1:
            raise ValueError("exponent must be in (0, 1]")
        if self.noise_cv < 0:
            raise ValueError("noise_cv must be >= 0")

    def mean_ms(self, bs: int) -> float:
        """Noise-free batch latency."""
        if bs < 1:
            raise ValueError(f"batch size must be >= 1, got {bs}")
        fixed = self.base_ms * self.fixed_fraction
        return fixed + self.base_ms * (1.0 - self.fixed_fraction) * bs ** self.exponent

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


# bs=1 baselines on one vCPU; the batch-scaling parameters are a tunable guess.
PRESETS = {
    "iris": LatencyModel(8.0),
    "toxic": LatencyModel(40.0),
    "mnist": LatencyModel(125.0),
    "mobilenet": LatencyModel(83.0),
    "resnet": LatencyModel(204.0),
    "onnx_resnet50": LatencyModel(201.0),
}


def preset(name: str, **overrides) -> LatencyModel:
    try:
        model = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(model, **overrides) if overrides else model


def noise_factor(cv: float, rng: Optional[np.random.Generator]) -> float:
    if cv == 0 or rng is None:
        return 1.0
    sigma2 = math.log1p(cv * cv)
    return float(rng.lognormal(-sigma2 / 2.0, math.sqrt(sigma2)))


def service_time(model: LatencyModel, bs: int, rng: Optional[np.random.Generator] = None) -> float:
    """Latency in ms for one batch of ``bs`` instances."""
    return model.mean_ms(bs) * noise_factor(model.noise_cv, rng)


class AutoscalerState:
    """Containers needed to hold the time-averaged in-flight request count.

    ``containers = max(1, ceil(avg_in_flight / (target_concurrency *
    target_utilization)))`` with the average taken over the trailing
    ``window_ms`` (or the elapsed time, if shorter). Knative's stock
    utilization target is 0.7; the default of 1.0 keeps the plain ratio.
    """

    def __init__(self, target_concurrency: int = 1, window_ms: float = 60_000.0,
                 start: float = 0.0, target_utilization: float = 1.0):
        if target_concurrency < 1:
            raise ValueError("target_concurrency must be >= 1")
        if window_ms <= 0:
            raise ValueError("window_ms must be positive")
        if not 0 < target_utilization <= 1:
            raise ValueError("target_utilization must be in (0, 1]")
        self.target_concurrency = target_concurrency
        self.target_utilization = target_utilization
        self.window_ms = float(window_ms)
        self.start = start
        self.in_flight = 0
        # step function: level[i] holds from ts[i]; cum[i] = area before ts[i]
        self._ts = [start]
        self._level = [0]
        self._cum = [0.0]
        self._head = 0

    def _area_until(self, t: float) -> float:
        i = bisect.bisect_right(self._ts, t, lo=self._head) - 1
        if i < self._head:
            i = self._head
            t = max(t, self._ts[i])
        return self._cum[i] + self._level[i] * (t - self._ts[i])

    def _set(self, level: int, now: float) -> None:
        last = self._ts[-1]
        now = max(now, last)
        self.in_flight = level
        if now == last:
            self._level[-1] = level
        else:
            self._cum.append(self._cum[-1] + self._level[-1] * (now - last))
            self._ts.append(now)
            self._level.append(level)
        self._prune(now)

    def _prune(self, now: float) -> None:
        cutoff = now - self.window_ms
        ts, head = self._ts, self._head
        while head + 1 < len(ts) and ts[head + 1] <= cutoff:
            head += 1
        self._head = head
        if head > 4096 and head * 2 > len(ts):
            del self._ts[:head], self._level[:head], self._cum[:head]
            self._head = 0

    def begin(self, now: float, n: int = 1) -> None:
        self._set(self.in_flight + n, now)

    def end(self, now: float, n: int = 1) -> None:
        if self.in_flight < n:
            raise ValueError("more completions than starts")
        self._set(self.in_flight - n, now)

    def average_in_flight(self, now: float) -> float:
        lo = max(now - self.window_ms, self.start)
        if now <= lo:
            return float(self.in_flight)
        return (self._area_until(now) - self._area_until(lo)) / (now - lo)

    def container_count(self, now: float) -> int:
        need = self.average_in_flight(now) / (self.target_concurrency * self.target_utilization)
        return max(1, math.ceil(need - 1e-9))


def mock_serve_latency(instances, model: LatencyModel, rng: Optional[np.random.Generator]) -> float:
    if not isinstance(instances, list) or not instances:
        raise ValueError("body must be a non-empty JSON array")
    return service_time(model, len(instances), rng)


class MockBackend:
    """HTTP upstream echoing its input after a modeled delay."""

    def __init__(self, model: LatencyModel, target_concurrency: int = 1,
                 window_ms: float = 60_000.0):
        self.model = model
        self.rng = model.rng()
        self.t0 = time.monotonic()
        self.autoscaler = AutoscalerState(target_concurrency, window_ms, start=0.0)
        self.served = 0
        self.instances = 0

    def now_ms(self) -> float:
        return (time.monotonic() - self.t0) * 1000.0

    async def predict(self, request: web.Request) -> web.Response:
        try:
            body = await request.json()
            latency = mock_serve_latency(body, self.model, self.rng)
        except ValueError as exc:
            return web.json_response({"error": str(exc)}, status=400)
        self.autoscaler.begin(self.now_ms())
        try:
            await asyncio.sleep(latency / 1000.0)
        finally:
            self.autoscaler.end(self.now_ms())
        self.served += 1
        self.instances += len(body)
        return web.json_response(body, headers={"X-Service-Time-Ms": f"{latency:.3f}"})

    async def stats(self, request: web.Request) -> web.Response:
        now = self.now_ms()
        return web.json_response({
            "containers": self.autoscaler.container_count(now),
            "in_flight": self.autoscaler.in_flight,
            "served": self.served,
            "instances": self.instances,
        })

    async def healthz(self, request: web.Request) -> web.Response:
        return web.Response(text="ok")

    def app(self) -> web.Application:
        app = web.Application()
        app.router.add_post("/predict", self.predict)
        app.router.add_get("/stats", self.stats)
        app.router.add_get("/healthz", self.healthz)
        return app
