"""Workload configuration: one JSON document per upstream workload."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union

ENV_PREFIX = "BATCHGATE_"
MERGE_STRATEGIES = ("json_array",)


class ConfigError(ValueError):
    """Raised for unparsable documents or invalid field values."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class WorkloadConfig:
    name: str
    upstream_url: str
    slo_target_ms: float
    slo_percentile: float = 95.0
    safety_factor: float = 0.8
    timeout_ratio_thresh: float = 0.3
    inc_step: float = 1.0
    dec_mult: float = 0.8
    optimizer_interval_ms: int = 30_000
    latency_window_ms: int = 60_000
    min_samples: int = 5
    absolute_max_batch: int = 64
    merge_strategy: str = "json_array"
    # None means 10 x slo_target_ms; resolved in __post_init__.
    upstream_timeout_ms: Optional[int] = None
    instances_key: Optional[str] = None
    predictions_key: Optional[str] = None
    passthrough_headers: tuple = field(default_factory=tuple)

    def __post_init__(self) -> None:
        _validate(self)
        if self.upstream_timeout_ms is None:
            object.__setattr__(self, "upstream_timeout_ms", int(round(10 * self.slo_target_ms)))

    @property
    def violation_threshold_ms(self) -> float:
        """Response-time level above which the optimizer backs off."""
        return self.safety_factor * self.slo_target_ms

    def replace(self, **changes: Any) -> "WorkloadConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["passthrough_headers"] = list(self.passthrough_headers)
        return d


_FIELDS = {f.name: f for f in dataclasses.fields(WorkloadConfig)}
_REQUIRED = ("name", "upstream_url", "slo_target_ms")
_INT_FIELDS = {"optimizer_interval_ms", "latency_window_ms", "min_samples",
               "absolute_max_batch", "upstream_timeout_ms"}
_FLOAT_FIELDS = {"slo_target_ms", "slo_percentile", "safety_factor",
                 "timeout_ratio_thresh", "inc_step", "dec_mult"}
_STR_FIELDS = {"name", "upstream_url", "merge_strategy", "instances_key", "predictions_key"}


def _check(cond: bool, name: str, message: str) -> None:
    if not cond:
        raise ConfigError(message, field=name)


def _validate(cfg: WorkloadConfig) -> None:
    _check(isinstance(cfg.name, str) and cfg.name != "", "name", "must be a non-empty string")
    _check(isinstance(cfg.upstream_url, str) and "://" in cfg.upstream_url,
           "upstream_url", "must be an absolute URL")
    _check(cfg.slo_target_ms > 0, "slo_target_ms", "must be > 0")
    _check(0 < cfg.slo_percentile <= 100, "slo_percentile", "must be in (0, 100]")
    _check(0 < cfg.safety_factor <= 1, "safety_factor", "must be in (0, 1]")
    _check(0 <= cfg.timeout_ratio_thresh <= 1, "timeout_ratio_thresh", "must be in [0, 1]")
    _check(cfg.inc_step > 0, "inc_step", "must be > 0")
    _check(0 < cfg.dec_mult < 1, "dec_mult", "must be in (0, 1)")
    _check(cfg.optimizer_interval_ms > 0, "optimizer_interval_ms", "must be > 0")
    _check(cfg.latency_window_ms > 0, "latency_window_ms", "must be > 0")
    _check(cfg.min_samples >= 1, "min_samples", "must be >= 1")
    _check(cfg.absolute_max_batch >= 1, "absolute_max_batch", "must be >= 1")
    _check(cfg.merge_strategy in MERGE_STRATEGIES, "merge_strategy",
           f"must be one of {', '.join(MERGE_STRATEGIES)}")
    if cfg.upstream_timeout_ms is not None:
        _check(cfg.upstream_timeout_ms > 0, "upstream_timeout_ms", "must be > 0")


def _coerce(name: str, value: Any) -> Any:
    if value is None:
        if name in _REQUIRED:
            raise ConfigError("is required", field=name)
        return None
    try:
        if name in _INT_FIELDS:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if name in _FLOAT_FIELDS:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if name in _STR_FIELDS:
            if not isinstance(value, str):
                raise ValueError(value)
            return value
        if name == "passthrough_headers":
            if isinstance(value, str):
                value = [h.strip() for h in value.split(",") if h.strip()]
            return tuple(str(h).lower() for h in value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r}", field=name) from None
    return value


def _env_overrides(env: Mapping[str, str]) -> dict:
    out = {}
    for name in _FIELDS:
        key = ENV_PREFIX + name.upper()
        if key in env:
            out[name] = env[key]
    return out


def _from_mapping(doc: Mapping[str, Any], env: Optional[Mapping[str, str]]) -> WorkloadConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError("workload document must be a JSON object")
    unknown = sorted(set(doc) - set(_FIELDS))
    if unknown:
        raise ConfigError("unknown field", field=unknown[0])
    merged = dict(doc)
    if env:
        merged.update(_env_overrides(env))
    for name in _REQUIRED:
        if name not in merged:
            raise ConfigError("is required", field=name)
    kwargs = {name: _coerce(name, value) for name, value in merged.items()}
    if kwargs.get("passthrough_headers") is None:
        kwargs.pop("passthrough_headers", None)
    return WorkloadConfig(**kwargs)


def _parse(document: Union[str, bytes, Mapping, Sequence]) -> Any:
    if isinstance(document, (str, bytes)):
        try:
            return json.loads(document)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"parse error: {exc}") from None
    return document


def load_config(document: Union[str, bytes, Mapping],
                env: Optional[Mapping[str, str]] = None) -> WorkloadConfig:
    """Parse and validate a single workload document.

    ``env`` holds ``BATCHGATE_<FIELD>`` overrides, which win over the
    document. Pass ``os.environ`` to honour the process environment.
    """
    doc = _parse(document)
    if isinstance(doc, list):
        if len(doc) != 1:
            raise ConfigError("expected exactly one workload document, got a list")
        doc = doc[0]
    return _from_mapping(doc, env)


def load_configs(document: Union[str, bytes, Mapping, Sequence],
                 env: Optional[Mapping[str, str]] = None) -> list[WorkloadConfig]:
    """Parse a document holding one workload object or a list of them."""
    doc = _parse(document)
    docs = doc if isinstance(doc, list) else [doc]
    if not docs:
        raise ConfigError("no workloads defined")
    configs = [_from_mapping(d, env) for d in docs]
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate workload name", field="name")
    return configs


def load_config_file(path: Union[str, Path], use_env: bool = True) -> list[WorkloadConfig]:
    text = Path(path).read_text()
    return load_configs(text, os.environ if use_env else None)
