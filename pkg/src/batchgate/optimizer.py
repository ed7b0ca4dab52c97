"""Low-frequency AIMD controller for the maximum batch size."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .config import WorkloadConfig
from .monitor import MonitorSnapshot


@dataclass(frozen=True)
class AimdState:
    internal_max: float = 1.0
    effective_max: int = 1
    last_step_at: float = 0.0


def effective(internal_max: float, absolute_max_batch: int) -> int:
    return min(max(math.floor(internal_max), 1), absolute_max_batch)


def initial_state(cfg: WorkloadConfig, now: float = 0.0) -> AimdState:
    return AimdState(1.0, effective(1.0, cfg.absolute_max_batch), now)


def check_violation(snapshot: MonitorSnapshot, cfg: WorkloadConfig) -> bool:
    """True when too many batches time out or the tail latency runs hot.

    Missing statistics count as healthy.
    """
    ratio = snapshot.timeout_ratio
    if ratio is not None and ratio > cfg.timeout_ratio_thresh:
        return True
    rt = snapshot.e2e_percentile_ms
    return rt is not None and rt > cfg.violation_threshold_ms


def step(state: AimdState, violation: bool, cfg: WorkloadConfig, now: float) -> AimdState:
    if violation:
        internal = max(1.0, state.internal_max * cfg.dec_mult)
    else:
        internal = min(float(cfg.absolute_max_batch), state.internal_max + cfg.inc_step)
    return AimdState(internal, effective(internal, cfg.absolute_max_batch), now)


def due(state: AimdState, cfg: WorkloadConfig, now: float) -> bool:
    return now >= state.last_step_at + cfg.optimizer_interval_ms
