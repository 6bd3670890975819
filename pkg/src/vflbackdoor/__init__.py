"""Simulator of feature-partitioned (vertical) federated learning with
passive-party backdoor attacks and active-party defenses."""

from .errors import ConfigError, DataError, InvariantError, ProtocolError, VFLError
from .experiment import EpochMetrics, RunConfig, emit_report, run_experiment

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "EpochMetrics", "InvariantError", "ProtocolError",
           "RunConfig", "VFLError", "emit_report", "run_experiment"]
