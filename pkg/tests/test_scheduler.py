import math

import pytest
from hypothesis import given, settings, strategies as st

from batchgate.monitor import Cause
from batchgate.scheduler import (BatchQueue, DispatchNow, PendingRequest, SchedulerError, WaitUntil,
                                 drain, on_arrival, on_timeout, settle)


def queue_with(*arrivals):
    q = BatchQueue()
    for i, t in enumerate(arrivals):
        q.append(PendingRequest(i, t))
    return q


def const(v):
    return lambda bs: v


def test_eq_timeout_arithmetic():
    q = queue_with(0.0, 20.0)
    d = on_arrival(q, 50.0, max_bs=8, slo_target_ms=500, p95_lookup=const(300.0))
    assert isinstance(d, WaitUntil)
    # DTO = 200, FRT elapsed = 50, so 150 ms remain
    assert d.deadline - 50.0 == 150.0
    assert q.armed_deadline == d.deadline
    assert d.version == q.version


def test_lookup_uses_next_batch_size():
    asked = []
    q = queue_with(0.0, 1.0)
    on_arrival(q, 1.0, 8, 500, lambda bs: asked.append(bs) or 100.0)
    assert asked == [3]


def test_full_branch():
    q = queue_with(*range(8))
    assert on_arrival(q, 8.0, 8, 500, const(100.0)) == DispatchNow(Cause.FULL)
    assert q.armed_deadline is None


def test_negative_dto_dispatches_immediately():
    q = queue_with(0.0)
    assert on_arrival(q, 0.0, 8, 500, const(520.0)) == DispatchNow(Cause.TIMEOUT)
    q = queue_with(0.0)
    # exactly zero remaining also dispatches
    assert on_arrival(q, 200.0, 8, 500, const(300.0)) == DispatchNow(Cause.TIMEOUT)


def test_cold_start_forced():
    q = queue_with(0.0)
    assert on_arrival(q, 0.0, 8, 500, const(None)) == DispatchNow(Cause.FORCED)


def test_empty_queue_is_contract_violation():
    with pytest.raises(SchedulerError):
        on_arrival(BatchQueue(), 0.0, 8, 500, const(1.0))
    with pytest.raises(SchedulerError):
        drain(BatchQueue())


def test_on_timeout_fires_and_goes_stale():
    q = queue_with(0.0)
    w = on_arrival(q, 0.0, 8, 500, const(300.0))
    assert on_timeout(q, w.deadline - 1, w.version) is None  # early
    assert on_timeout(q, w.deadline, w.version) == DispatchNow(Cause.TIMEOUT)
    assert q.armed_deadline is None

    q = queue_with(0.0)
    w0 = on_arrival(q, 0.0, 8, 500, const(300.0))
    q.append(PendingRequest(1, w0.deadline - 1))
    w1 = on_arrival(q, w0.deadline - 1, 8, 500, const(250.0))
    assert w1.deadline > w0.deadline
    assert on_timeout(q, w0.deadline, w0.version) is None
    assert on_timeout(q, w1.deadline, w1.version) == DispatchNow(Cause.TIMEOUT)


def test_timer_stale_after_full_dispatch():
    q = queue_with(0.0)
    w = on_arrival(q, 0.0, 2, 500, const(300.0))
    q.append(PendingRequest(1, 5.0))
    assert on_arrival(q, 5.0, 2, 500, const(300.0)).cause is Cause.FULL
    drain(q)
    assert on_timeout(q, w.deadline, w.version) is None


def test_drain_fifo_and_reset():
    q = queue_with(1.0, 2.0, 3.0)
    batch = drain(q)
    assert [r.payload for r in batch] == [0, 1, 2]
    assert len(q) == 0 and q.frt_start is None and q.armed_deadline is None
    q.append(PendingRequest("next", 10.0))
    assert q.frt_start == 10.0
    drain(q)
    with pytest.raises(SchedulerError):
        drain(q)


def test_drain_with_limit_restarts_frt():
    q = queue_with(1.0, 2.0, 3.0)
    assert [r.payload for r in drain(q, 2)] == [0, 1]
    assert q.frt_start == 3.0 and len(q) == 1


def test_append_rejects_time_travel():
    q = queue_with(5.0)
    with pytest.raises(SchedulerError):
        q.append(PendingRequest(1, 4.0))


def test_settle_splits_after_cap_drop():
    q = queue_with(*[float(i) for i in range(7)])
    batches, wait = settle(q, 7.0, 3, 500, const(100.0))
    assert [len(m) for m, _ in batches] == [3, 3]
    assert all(c is Cause.FULL for _, c in batches)
    assert isinstance(wait, WaitUntil) and len(q) == 1
    assert wait.deadline == 6.0 + 400.0


def test_settle_with_injected_decision():
    q = queue_with(0.0, 1.0)
    batches, wait = settle(q, 300.0, 8, 500, const(300.0), first=DispatchNow(Cause.TIMEOUT))
    assert batches and batches[0][1] is Cause.TIMEOUT and wait is None and len(q) == 0


@settings(max_examples=300, deadline=None)
@given(gaps=st.lists(st.floats(0, 100), min_size=1, max_size=30),
       est=st.lists(st.floats(1, 600), min_size=1, max_size=30),
       max_bs=st.integers(1, 10))
def test_deadline_depends_only_on_frt_and_estimate(gaps, est, max_bs):
    """Arrival-driven runs: every wait deadline is frt_start + slo - p95(bs+1),
    batches never exceed the cap, order is preserved, and nothing is stranded."""
    slo = 500.0
    q, t, out = BatchQueue(), 0.0, []
    for i, g in enumerate(gaps):
        t += g
        q.append(PendingRequest(i, t))
        lookup = lambda bs: est[bs % len(est)]
        frt = q.frt_start
        bs0 = len(q)
        batches, wait = settle(q, t, max_bs, slo, lookup)
        for members, _ in batches:
            assert len(members) <= max_bs
            out.extend(m.payload for m in members)
        if wait is not None:
            assert not batches
            assert math.isclose(wait.deadline, frt + (slo - lookup(bs0 + 1)), rel_tol=1e-12)
            assert wait.deadline > t
            assert q.armed_deadline == wait.deadline
        else:
            assert len(q) == 0
    if len(q):
        out.extend(m.payload for m in drain(q))
    assert out == list(range(len(gaps)))


@settings(max_examples=200, deadline=None)
@given(ops=st.lists(st.tuples(st.sampled_from(["arrive", "fire"]), st.floats(0, 400)),
                    min_size=1, max_size=60))
def test_no_request_waits_forever(ops):
    """After any action, a non-empty queue either has an armed deadline or was just dispatched."""
    q, t, n, timer = BatchQueue(), 0.0, 0, None
    lookup = const(200.0)
    for kind, gap in ops:
        t += gap
        if kind == "arrive":
            q.append(PendingRequest(n, t))
            n += 1
            _, wait = settle(q, t, 4, 500, lookup)
        elif timer is not None and t >= timer.deadline:
            t = max(t, timer.deadline)
            d = on_timeout(q, t, timer.version)
            _, wait = settle(q, t, 4, 500, lookup, first=d) if d else (None, None)
        else:
            continue
        if wait is not None:
            timer = wait
        if len(q):
            assert q.armed_deadline is not None
