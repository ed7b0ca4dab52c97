"""High-frequency queue scheduler.

Every arrival recomputes the dispatch deadline from the SLO target, the
tail-latency estimate for one more request than is currently queued, and
the age of the oldest queued request::

    dispatch_timeout = slo_target - p95(batch_size + 1)
    timeout          = dispatch_timeout - (now - first_arrival)

A batch leaves the queue when it reaches the cap, when its deadline passes,
or immediately when the computed timeout is no longer positive.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, List, Optional, Tuple, Union

from .monitor import Cause

P95Lookup = Callable[[int], Optional[float]]


class SchedulerError(RuntimeError):
    """Contract violation, e.g. deciding on or draining an empty queue."""


@dataclass
class PendingRequest:
    payload: Any
    arrival_ts: float
    reply: Any = None


@dataclass(frozen=True)
class WaitUntil:
    deadline: float
    version: int


@dataclass(frozen=True)
class DispatchNow:
    cause: Cause


Decision = Union[WaitUntil, DispatchNow]


@dataclass
class BatchQueue:
    pending: List[PendingRequest] = field(default_factory=list)
    frt_start: Optional[float] = None
    armed_deadline: Optional[float] = None
    # bumped on every arm/disarm; a timer carrying an older value is stale
    version: int = 0

    def __len__(self) -> int:
        return len(self.pending)

    def append(self, request: PendingRequest) -> None:
        if self.pending and request.arrival_ts < self.pending[-1].arrival_ts:
            raise SchedulerError("arrivals must be appended in time order")
        if not self.pending:
            self.frt_start = request.arrival_ts
        self.pending.append(request)

    def arm(self, deadline: float) -> int:
        self.version += 1
        self.armed_deadline = deadline
        return self.version

    def disarm(self) -> None:
        if self.armed_deadline is not None:
            self.version += 1
            self.armed_deadline = None


def on_arrival(queue: BatchQueue, now: float, max_bs: int, slo_target_ms: float,
               p95_lookup: P95Lookup) -> Decision:
    """Decide what to do with the queue right after a request joined it.

    Also used to re-evaluate a queue whose cap just changed. Arms the queue's
    deadline on a wait decision and disarms it on a dispatch decision.
    """
    if not queue.pending:
        raise SchedulerError("on_arrival called on an empty queue")
    bs = len(queue.pending)
    if bs >= max_bs:
        queue.disarm()
        return DispatchNow(Cause.FULL)
    estimate = p95_lookup(bs + 1)
    if estimate is None:
        queue.disarm()
        return DispatchNow(Cause.FORCED)
    dto = slo_target_ms - estimate
    frt_elapsed = now - queue.frt_start
    timeout = dto - frt_elapsed
    if timeout <= 0:
        queue.disarm()
        return DispatchNow(Cause.TIMEOUT)
    # frt_start + dto == now + timeout; anchoring on frt_start avoids drift
    deadline = queue.frt_start + dto
    return WaitUntil(deadline, queue.arm(deadline))


def on_timeout(queue: BatchQueue, now: float, version: int) -> Optional[DispatchNow]:
    """Handle a fired timer. Returns None when the timer is stale."""
    if version != queue.version or queue.armed_deadline is None or not queue.pending:
        return None
    if now < queue.armed_deadline:
        return None
    queue.disarm()
    return DispatchNow(Cause.TIMEOUT)


def drain(queue: BatchQueue, limit: Optional[int] = None) -> List[PendingRequest]:
    """Remove and return queued requests in arrival order.

    With ``limit`` only the oldest ``limit`` requests leave; the first-request
    timer then restarts at the new head's arrival time.
    """
    if not queue.pending:
        raise SchedulerError("drain called on an empty queue")
    if limit is None or limit >= len(queue.pending):
        batch, queue.pending = queue.pending, []
    else:
        batch, queue.pending = queue.pending[:limit], queue.pending[limit:]
    queue.disarm()
    queue.frt_start = queue.pending[0].arrival_ts if queue.pending else None
    return batch


def settle(queue: BatchQueue, now: float, max_bs: int, slo_target_ms: float,
           p95_lookup: P95Lookup,
           first: Optional[DispatchNow] = None) -> Tuple[List[Tuple[List[PendingRequest], Cause]], Optional[WaitUntil]]:
    """Run decisions until the queue is empty or waiting on a deadline.

    ``first`` lets a timer callback inject its timeout decision. Batches never
    exceed ``max_bs``, so a queue left longer than a freshly lowered cap is
    split. Returns the batches to dispatch and the armed wait, if any.
    """
    batches = []
    decision: Optional[Decision] = first
    while queue.pending:
        if decision is None:
            decision = on_arrival(queue, now, max_bs, slo_target_ms, p95_lookup)
        if isinstance(decision, WaitUntil):
            return batches, decision
        batches.append((drain(queue, max_bs), decision.cause))
        decision = None
    return batches, None
