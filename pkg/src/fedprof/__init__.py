"""fedprof: a deterministic federated-learning simulator and preference-
profiling attack laboratory.

Layers:
  nn       minimal differentiable network engine (dense/conv, SGD, DP-SGD)
  data     synthetic datasets, IDX files, heterogeneous partitioning, metrics
  fedsim   the FL round loop with pluggable (attacker-controlled) aggregation
  attack   sensitivity extraction, shadow/meta pipeline, selective aggregation
  defense  dropout and DP-SGD mitigations plus the sweep driver
  harness  config validation, end-to-end experiments, reports, persistence
"""

from . import attack, data, defense, fedsim, harness, nn
from .errors import (ConfigError, FedprofError, FormatError, InputError,
                     InternalError, SpecError, StateError)

__all__ = [
    "attack", "data", "defense", "fedsim", "harness", "nn",
    "FedprofError", "InputError", "FormatError", "SpecError",
    "ConfigError", "StateError", "InternalError",
]

__version__ = "0.1.0"
