"""Sliding-window latency statistics keyed by batch size.

The store never reads a clock: every call carries ``now`` in milliseconds,
so the live proxy and the simulator drive the same code.
"""
from __future__ import annotations

import enum
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Tuple


class Cause(str, enum.Enum):
    TIMEOUT = "timeout"
    FULL = "full"
    FORCED = "forced"


def nearest_rank(sorted_values: Sequence[float], percentile: float) -> float:
    """Nearest-rank percentile of an already sorted, non-empty sequence."""
    n = len(sorted_values)
    if n == 0:
        raise ValueError("percentile of an empty sample")
    # exact rational arithmetic so 95 * 20 / 100 lands on rank 19, not 20
    rank = math.ceil(Fraction(str(percentile)) * n / 100)
    return sorted_values[min(max(rank, 1), n) - 1]


@dataclass(frozen=True)
class MonitorSnapshot:
    e2e_percentile_ms: Optional[float]
    timeout_ratio: Optional[float]
    samples_by_bs: Dict[int, int]
    as_of: float
    dispatch_counts: Dict[str, int] = field(default_factory=dict)
    e2e_samples: int = 0


class _Window:
    """Time-ordered (timestamp, value) samples with a cached sort."""

    __slots__ = ("items", "_sorted")

    def __init__(self) -> None:
        self.items: Deque[Tuple[float, float]] = deque()
        self._sorted: Optional[List[float]] = None

    def append(self, ts: float, value: float) -> None:
        self.items.append((ts, value))
        self._sorted = None

    def evict(self, cutoff: float) -> None:
        items = self.items
        if items and items[0][0] < cutoff:
            while items and items[0][0] < cutoff:
                items.popleft()
            self._sorted = None

    def stale(self, cutoff: float) -> int:
        """Number of leading samples older than ``cutoff``."""
        n = 0
        for ts, _ in self.items:
            if ts >= cutoff:
                break
            n += 1
        return n

    def values(self, cutoff: float) -> List[float]:
        skip = self.stale(cutoff)
        if skip == 0:
            if self._sorted is None:
                self._sorted = sorted(v for _, v in self.items)
            return self._sorted
        return sorted(v for i, (_, v) in enumerate(self.items) if i >= skip)

    def count(self, cutoff: float) -> int:
        return len(self.items) - self.stale(cutoff)


class LatencyStore:
    """Smart-monitor state for one workload.

    Parameters
    ----------
    window_ms : float
        Samples older than ``latest - window_ms`` are ignored and evicted.
    percentile : float
        Percentile reported for both upstream and end-to-end latencies.
    min_samples : int
        Samples needed at a batch size before its own estimate is used.
    """

    def __init__(self, window_ms: float, percentile: float = 95.0, min_samples: int = 5):
        if window_ms <= 0:
            raise ValueError("window_ms must be positive")
        self.window_ms = float(window_ms)
        self.percentile = float(percentile)
        self.min_samples = int(min_samples)
        self.upstream_by_bs: Dict[int, _Window] = {}
        self.e2e = _Window()
        self.dispatches: Deque[Tuple[float, Cause]] = deque()
        self.latest = -math.inf
        self._lock = threading.RLock()

    @classmethod
    def from_config(cls, cfg) -> "LatencyStore":
        return cls(cfg.latency_window_ms, cfg.slo_percentile, cfg.min_samples)

    def _advance(self, now: float) -> None:
        if now > self.latest:
            self.latest = now
        cutoff = self.latest - self.window_ms
        for w in self.upstream_by_bs.values():
            w.evict(cutoff)
        self.e2e.evict(cutoff)
        d = self.dispatches
        while d and d[0][0] < cutoff:
            d.popleft()

    def _cutoff(self, now: float) -> float:
        return max(self.latest, now) - self.window_ms

    def record_upstream(self, bs: int, latency_ms: float, now: float) -> None:
        if bs < 1:
            raise ValueError(f"batch size must be >= 1, got {bs}")
        if latency_ms < 0:
            raise ValueError("latency must be non-negative")
        with self._lock:
            self._advance(now)
            w = self.upstream_by_bs.get(bs)
            if w is None:
                w = self.upstream_by_bs[bs] = _Window()
            w.append(now, float(latency_ms))

    def record_e2e(self, latency_ms: float, now: float) -> None:
        if latency_ms < 0:
            raise ValueError("latency must be non-negative")
        with self._lock:
            self._advance(now)
            self.e2e.append(now, float(latency_ms))

    def record_dispatch(self, cause: Cause, now: float) -> None:
        with self._lock:
            self._advance(now)
            self.dispatches.append((now, Cause(cause)))

    def upstream_percentile(self, bs: int, now: float) -> Optional[float]:
        """Configured percentile of upstream latency for batches of ``bs``.

        Falls back to the nearest batch size holding at least ``min_samples``
        samples (ties go to the larger size), then to the nearest size with
        any samples at all. Returns None only when the store is empty.
        """
        if bs < 1:
            raise ValueError(f"batch size must be >= 1, got {bs}")
        with self._lock:
            cutoff = self._cutoff(now)
            counts = {k: w.count(cutoff) for k, w in self.upstream_by_bs.items()}
            key = _nearest_key(bs, [k for k, c in counts.items() if c >= self.min_samples])
            if key is None:
                key = _nearest_key(bs, [k for k, c in counts.items() if c > 0])
            if key is None:
                return None
            return nearest_rank(self.upstream_by_bs[key].values(cutoff), self.percentile)

    p95_upstream = upstream_percentile

    def e2e_percentile(self, now: float) -> Optional[float]:
        with self._lock:
            values = self.e2e.values(self._cutoff(now))
            return nearest_rank(values, self.percentile) if values else None

    def timeout_ratio(self, now: float) -> Optional[float]:
        """Share of timeout dispatches among timeout + full dispatches.

        Forced dispatches (cold start, shutdown) carry no signal about the
        batch-size cap and are left out of both counts.
        """
        counts = self.dispatch_counts(now)
        total = counts[Cause.TIMEOUT.value] + counts[Cause.FULL.value]
        if total == 0:
            return None
        return counts[Cause.TIMEOUT.value] / total

    def dispatch_counts(self, now: float) -> Dict[str, int]:
        with self._lock:
            cutoff = self._cutoff(now)
            counts = {c.value: 0 for c in Cause}
            for ts, cause in self.dispatches:
                if ts >= cutoff:
                    counts[cause.value] += 1
            return counts

    def snapshot(self, now: float) -> MonitorSnapshot:
        with self._lock:
            cutoff = self._cutoff(now)
            by_bs = {k: w.count(cutoff) for k, w in sorted(self.upstream_by_bs.items())}
            return MonitorSnapshot(
                e2e_percentile_ms=self.e2e_percentile(now),
                timeout_ratio=self.timeout_ratio(now),
                samples_by_bs={k: c for k, c in by_bs.items() if c > 0},
                as_of=now,
                dispatch_counts=self.dispatch_counts(now),
                e2e_samples=self.e2e.count(cutoff),
            )

    def seed_upstream(self, samples: Iterable[Tuple[int, float]], now: float) -> None:
        """Bulk-load (bs, latency_ms) samples stamped at ``now``."""
        for bs, latency in samples:
            self.record_upstream(bs, latency, now)


def _nearest_key(bs: int, keys: Iterable[int]) -> Optional[int]:
    best = None
    for k in keys:
        if best is None:
            best = k
            continue
        d, bd = abs(k - bs), abs(best - bs)
        if d < bd or (d == bd and k > best):
            best = k
    return best
