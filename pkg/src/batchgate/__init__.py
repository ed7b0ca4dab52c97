"""SLO-aware adaptive batching reverse proxy for ML inference backends."""
from .config import ConfigError, WorkloadConfig, load_config, load_configs
from .monitor import Cause, LatencyStore, MonitorSnapshot

__all__ = ["Cause", "ConfigError", "LatencyStore", "MonitorSnapshot", "WorkloadConfig",
           "load_config", "load_configs"]
__version__ = "0.1.0"
