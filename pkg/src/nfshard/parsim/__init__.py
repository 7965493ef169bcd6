"""Deterministic multicore simulation of NF models."""

from .equivalence import EquivalenceReport, check_equivalence, check_interchangeable
from .executors import (Metrics, SimConfig, exec_lock_based, exec_shared_nothing, lock_mode_bundle,
                        software_steer)
from .skew import SkewReport, measure_skew
from .traffic import TrafficSpec, gen_traffic

__all__ = [
    "EquivalenceReport", "check_equivalence", "check_interchangeable", "Metrics", "SimConfig",
    "exec_lock_based", "exec_shared_nothing", "lock_mode_bundle", "software_steer",
    "SkewReport", "measure_skew", "TrafficSpec", "gen_traffic",
]
