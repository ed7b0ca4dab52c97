"""HTTP data plane: queue client requests, merge them into one upstream call,
fan the upstream response back out, and feed the monitor."""
from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import aiohttp
from aiohttp import web

from . import optimizer, scheduler
from .config import WorkloadConfig
from .monitor import Cause, LatencyStore
from .scheduler import BatchQueue, PendingRequest

logger = logging.getLogger(__name__)

CAUSE_HEADER = "X-Batchgate-Cause"
BATCH_SIZE_HEADER = "X-Batchgate-Batch-Size"


class BadRequest(ValueError):
    pass


class BatchSplitError(ValueError):
    pass


@dataclass
class InferenceRequest:
    body: Any
    headers: Dict[str, str] = field(default_factory=dict)
    arrival_ts: float = 0.0
    reply: Optional[asyncio.Future] = None


@dataclass
class BatchEnvelope:
    merged_body: list
    counts: List[int]
    dispatch_ts: float
    cause: Cause
    members: List[InferenceRequest] = field(default_factory=list)
    rejected: List[InferenceRequest] = field(default_factory=list)

    @property
    def bs(self) -> int:
        return len(self.counts)


def parse_instances(raw: bytes, instances_key: Optional[str] = None) -> list:
    """Decode a client body into its instance list."""
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise BadRequest(f"body is not valid JSON: {exc}") from None
    if instances_key is not None and isinstance(doc, dict):
        doc = doc.get(instances_key)
    if not isinstance(doc, list) or not doc:
        raise BadRequest("body must be a non-empty JSON array of instances")
    return doc


def _valid_body(body: Any) -> bool:
    return isinstance(body, list) and len(body) > 0


def merge_bodies(requests: Sequence[InferenceRequest], dispatch_ts: float = 0.0,
                 cause: Cause = Cause.FULL) -> BatchEnvelope:
    """Concatenate member bodies in order. Malformed members land in
    ``rejected`` and are not part of the batch."""
    merged: list = []
    counts: List[int] = []
    members, rejected = [], []
    for req in requests:
        if not _valid_body(req.body):
            rejected.append(req)
            continue
        merged.extend(req.body)
        counts.append(len(req.body))
        members.append(req)
    return BatchEnvelope(merged, counts, dispatch_ts, Cause(cause), members, rejected)


def split_response(envelope: BatchEnvelope, upstream_body: Any) -> List[list]:
    if not isinstance(upstream_body, list):
        raise BatchSplitError("upstream response is not a JSON array")
    expected = sum(envelope.counts)
    if len(upstream_body) != expected:
        raise BatchSplitError(
            f"upstream returned {len(upstream_body)} predictions for {expected} instances")
    out, pos = [], 0
    for n in envelope.counts:
        out.append(upstream_body[pos:pos + n])
        pos += n
    return out


Reply = Tuple[int, Any, Dict[str, str]]


class Workload:
    """Queue, monitor and AIMD state for one upstream, driven by the event loop.

    ``pinned_max`` freezes the batch-size cap (``1`` gives plain proxying).
    """

    def __init__(self, cfg: WorkloadConfig, session: aiohttp.ClientSession,
                 pinned_max: Optional[int] = None):
        self.cfg = cfg
        self.session = session
        self.loop = asyncio.get_running_loop()
        self.store = LatencyStore.from_config(cfg)
        self.queue = BatchQueue()
        self.aimd = optimizer.initial_state(cfg, self.now())
        self.pinned_max = pinned_max
        self._timer: Optional[asyncio.TimerHandle] = None
        self._inflight: set = set()
        self._optimizer_task: Optional[asyncio.Task] = None
        self.dispatched = 0
        self.accepted = 0
        self.answered = 0

    def now(self) -> float:
        return self.loop.time() * 1000.0

    @property
    def max_bs(self) -> int:
        if self.pinned_max is not None:
            return self.pinned_max
        return self.aimd.effective_max

    def _lookup(self, bs: int) -> Optional[float]:
        return self.store.upstream_percentile(bs, self.now())

    async def submit(self, req: InferenceRequest) -> Reply:
        req.arrival_ts = self.now()
        req.reply = self.loop.create_future()
        self.accepted += 1
        self.queue.append(PendingRequest(req, req.arrival_ts, req.reply))
        self._settle(req.arrival_ts)
        return await req.reply

    def _settle(self, now: float, first: Optional[scheduler.DispatchNow] = None) -> None:
        batches, wait = scheduler.settle(self.queue, now, self.max_bs, self.cfg.slo_target_ms,
                                         self._lookup, first=first)
        for members, cause in batches:
            self._start_dispatch([m.payload for m in members], cause, now)
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        if wait is not None:
            self._timer = self.loop.call_at(wait.deadline / 1000.0, self._on_timer, wait.version)

    def _on_timer(self, version: int) -> None:
        self._timer = None
        deadline = self.queue.armed_deadline
        # the loop may wake a hair before the deadline on coarse clocks
        now = max(self.now(), deadline if deadline is not None else 0.0)
        decision = scheduler.on_timeout(self.queue, now, version)
        if decision is not None:
            self._settle(now, first=decision)

    def _start_dispatch(self, members: List[InferenceRequest], cause: Cause, now: float) -> None:
        envelope = merge_bodies(members, now, cause)
        for req in envelope.rejected:
            self._reply(req, (400, {"error": "body must be a non-empty JSON array"}, {}))
        if not envelope.members:
            return
        self.store.record_dispatch(cause, now)
        self.dispatched += 1
        task = self.loop.create_task(self.dispatch_upstream(envelope))
        self._inflight.add(task)
        task.add_done_callback(self._inflight.discard)

    async def dispatch_upstream(self, envelope: BatchEnvelope) -> None:
        cfg = self.cfg
        body: Any = envelope.merged_body
        if cfg.instances_key:
            body = {cfg.instances_key: body}
        headers = {"Content-Type": "application/json"}
        first = envelope.members[0].headers
        for h in cfg.passthrough_headers:
            if h in first:
                headers[h] = first[h]
        meta = {CAUSE_HEADER: envelope.cause.value, BATCH_SIZE_HEADER: str(envelope.bs)}
        timeout = aiohttp.ClientTimeout(total=cfg.upstream_timeout_ms / 1000.0)
        try:
            async with self.session.post(cfg.upstream_url, data=json.dumps(body),
                                         headers=headers, timeout=timeout) as resp:
                raw = await resp.read()
                status = resp.status
        except (aiohttp.ClientError, asyncio.TimeoutError, OSError) as exc:
            logger.warning("%s: upstream call failed for batch of %d: %r", cfg.name, envelope.bs, exc)
            self._fail(envelope, f"upstream unavailable: {exc!r}", meta)
            return
        done = self.now()
        if not 200 <= status < 300:
            self._fail(envelope, f"upstream returned status {status}", meta, upstream_status=status)
            return
        self.store.record_upstream(envelope.bs, done - envelope.dispatch_ts, done)
        try:
            doc = json.loads(raw)
            if cfg.predictions_key and isinstance(doc, dict):
                doc = doc.get(cfg.predictions_key)
            slices = split_response(envelope, doc)
        except (json.JSONDecodeError, UnicodeDecodeError, BatchSplitError) as exc:
            self._fail(envelope, f"cannot split upstream response: {exc}", meta)
            return
        for req, part in zip(envelope.members, slices):
            payload = {cfg.predictions_key: part} if cfg.predictions_key else part
            if self._reply(req, (status, payload, meta)):
                self.store.record_e2e(done - req.arrival_ts, done)

    def _fail(self, envelope: BatchEnvelope, message: str, meta: Dict[str, str],
              upstream_status: Optional[int] = None) -> None:
        err = {"error": message}
        if upstream_status is not None:
            err["upstream_status"] = upstream_status
        for req in envelope.members:
            self._reply(req, (502, err, meta))

    def _reply(self, req: InferenceRequest, reply: Reply) -> bool:
        if _resolve(req, reply):
            self.answered += 1
            return True
        return False

    def start_optimizer(self) -> None:
        if self.pinned_max is None and self._optimizer_task is None:
            self._optimizer_task = self.loop.create_task(self._optimize_forever())

    async def _optimize_forever(self) -> None:
        cfg = self.cfg
        while True:
            due_at = self.aimd.last_step_at + cfg.optimizer_interval_ms
            await asyncio.sleep(max(0.0, (due_at - self.now()) / 1000.0))
            now = max(self.now(), due_at)
            snap = self.store.snapshot(now)
            violation = optimizer.check_violation(snap, cfg)
            before = self.aimd.effective_max
            self.aimd = optimizer.step(self.aimd, violation, cfg, now)
            logger.info("%s: violation=%s timeout_ratio=%s e2e_p=%s max_bs %d -> %d",
                        cfg.name, violation, snap.timeout_ratio, snap.e2e_percentile_ms,
                        before, self.aimd.effective_max)
            if self.aimd.effective_max < before and self.queue.pending:
                self._settle(now)

    async def shutdown(self) -> None:
        if self._optimizer_task is not None:
            self._optimizer_task.cancel()
        if self._timer is not None:
            self._timer.cancel()
            self._timer = None
        now = self.now()
        while self.queue.pending:
            members = scheduler.drain(self.queue, self.max_bs)
            self._start_dispatch([m.payload for m in members], Cause.FORCED, now)
        if self._inflight:
            await asyncio.gather(*list(self._inflight), return_exceptions=True)

    def metrics(self) -> dict:
        now = self.now()
        snap = self.store.snapshot(now)
        internal = float(self.pinned_max) if self.pinned_max is not None else self.aimd.internal_max
        return {
            "workload": self.cfg.name,
            "effective_max": self.max_bs,
            "internal_max": internal,
            "e2e_percentile_ms": snap.e2e_percentile_ms,
            "timeout_ratio": snap.timeout_ratio,
            "dispatch_counts_by_cause": snap.dispatch_counts,
            "samples_by_bs": {str(k): v for k, v in snap.samples_by_bs.items()},
            "queued": len(self.queue),
            "in_flight_batches": len(self._inflight),
            "dispatched_total": self.dispatched,
            "accepted_total": self.accepted,
            "answered_total": self.answered,
        }


def _resolve(req: InferenceRequest, reply: Reply) -> bool:
    if req.reply is not None and not req.reply.done():
        req.reply.set_result(reply)
        return True
    return False


class ProxyServer:
    def __init__(self, configs: Sequence[WorkloadConfig], pinned_max: Optional[int] = None):
        if not configs:
            raise ValueError("at least one workload is required")
        self.configs = list(configs)
        self.pinned_max = pinned_max
        self.workloads: Dict[str, Workload] = {}
        self.session: Optional[aiohttp.ClientSession] = None

    async def _startup(self, app: web.Application) -> None:
        connector = aiohttp.TCPConnector(limit=0)
        self.session = aiohttp.ClientSession(connector=connector)
        for cfg in self.configs:
            wl = Workload(cfg, self.session, self.pinned_max)
            wl.start_optimizer()
            self.workloads[cfg.name] = wl

    async def _shutdown(self, app: web.Application) -> None:
        await asyncio.gather(*(wl.shutdown() for wl in self.workloads.values()))
        if self.session is not None:
            await self.session.close()

    async def predict(self, request: web.Request) -> web.Response:
        wl = self.workloads.get(request.match_info["name"])
        if wl is None:
            return web.json_response({"error": "unknown workload"}, status=404)
        raw = await request.read()
        try:
            instances = parse_instances(raw, wl.cfg.instances_key)
        except BadRequest as exc:
            return web.json_response({"error": str(exc)}, status=400)
        headers = {k.lower(): v for k, v in request.headers.items()
                   if k.lower() in wl.cfg.passthrough_headers}
        status, body, meta = await wl.submit(InferenceRequest(instances, headers))
        return web.json_response(body, status=status, headers=meta)

    async def metrics(self, request: web.Request) -> web.Response:
        per = {name: wl.metrics() for name, wl in self.workloads.items()}
        doc = dict(next(iter(per.values())))
        doc["workloads"] = per
        return web.json_response(doc)

    async def healthz(self, request: web.Request) -> web.Response:
        return web.Response(text="ok")

    def app(self) -> web.Application:
        app = web.Application()
        app.router.add_post("/v1/workloads/{name:[^/:]+}:predict", self.predict)
        app.router.add_get("/metrics", self.metrics)
        app.router.add_get("/healthz", self.healthz)
        app.on_startup.append(self._startup)
        app.on_shutdown.append(self._shutdown)
        return app
