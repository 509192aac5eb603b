"""Workload harness: synthetic stores, traces, replay, and scenarios.

Everything here is deterministic from (spec, seed): generated stores report a
state digest, traces carry the oracle digest of every query's expected body,
and replay validates each response against that oracle, so a replay can tell
wrong bytes from slow bytes on any backend combination.
"""

from .arrivals import ArrivalModel, fluctuation_ratio, sample_bin_counts  # noqa: F401
from .generate import (  # noqa: F401
    GenReport,
    PROFILES,
    STORE_PRESETS,
    StoreSpec,
    Trace,
    WorkloadProfile,
    gen_store,
    gen_workload,
)
from .replay import LatencyModel, Metrics, replay  # noqa: F401
from .scenario import SCENARIOS, ScenarioReport, run_scenario  # noqa: F401
