"""Bundled, one-command scenarios reproducing the headline measurements.

    empty               no store, no queries; exercises the report plumbing
    slice-attach        geometry-scale slice: open + 3000-query job, timed
    frontier-speedup    warm proxy vs direct origin at 50 ms simulated RTT
    cache-dedup         Q distinct of N total through an infinite-TTL proxy
    failover-robustness replay with a flapping origin in front of a slice
    fluctuation         Poisson vs calibrated overdispersed load ratios

Scenario config is a versioned text document with sorted keys:

    iovstore-scenario-v1
    name = frontier-speedup
    rtt_ms = 50
    seed = 11

Unknown keys are rejected before any side effect. Reports come out twice:
a human table and machine-readable key=value lines.
"""

from __future__ import annotations

import math
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from ..cachetier import CachingProxy, FlapController, OriginServer, ProxyServer
from ..errors import ConfigError
from ..release import build_slice, open_slice
from ..snapshot import SliceSelection
from .arrivals import ArrivalModel, fluctuation_ratio, sample_bin_counts
from .generate import PROFILES, WorkloadProfile, gen_store, gen_workload
from .replay import LatencyModel, replay

SCENARIO_CONFIG_HEADER = "iovstore-scenario-v1"


@dataclass
class ScenarioReport:
    name: str
    params: dict
    values: dict

    def to_machine(self) -> str:
        rows = {"scenario": self.name}
        rows.update({f"param.{k}": v for k, v in self.params.items()})
        rows.update(self.values)
        return "".join(f"{k}={_fmt(v)}\n" for k, v in sorted(rows.items()))

    def to_text(self) -> str:
        lines = [f"scenario: {self.name}", ""]
        lines.append("parameters:")
        for k, v in sorted(self.params.items()):
            lines.append(f"  {k:<24} {_fmt(v)}")
        lines.append("results:")
        for k, v in sorted(self.values.items()):
            lines.append(f"  {k:<24} {_fmt(v)}")
        return "\n".join(lines) + "\n"

    def save(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.txt").write_text(self.to_text())
        (out_dir / "report.kv").write_text(self.to_machine())
        return out_dir / "report.kv"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


# -- individual scenarios ---------------------------------------------------------


def _empty(params: dict, work: Path) -> dict:
    return {"total_queries": 0, "status": "ok"}


def _slice_attach(params: dict, work: Path) -> dict:
    store, report = gen_store(params["preset"], params["seed"], work / "master")
    slice_path = work / "release.tar"
    build_slice(store, SliceSelection.everything(), slice_path)
    arrival = ArrivalModel("poisson", rate=1.0, duration=1.0)
    trace = gen_workload(store, params["profile"], arrival, n_jobs=1, seed=params["seed"])

    t0 = time.perf_counter()
    handle = open_slice(slice_path, verify="eager")
    open_s = time.perf_counter() - t0
    handle.close()

    metrics = replay(trace, [f"slice:{slice_path}"], clock="real", workers=1)
    job_s = metrics.job_wall_max_s
    return {
        "snapshot_bytes": slice_path.stat().st_size,
        "store_state_digest": report.state_digest,
        "open_s": open_s,
        "job_s": job_s,
        "attach_total_s": open_s + job_s,
        "queries": metrics.total_queries,
        "bytes_read": metrics.bytes_read,
        "wrong_results": metrics.wrong_results,
        "under_10s": (open_s + job_s) < 10.0,
    }


def _frontier_speedup(params: dict, work: Path) -> dict:
    store, _ = gen_store(params["preset"], params["seed"], work / "master")
    arrival = ArrivalModel("poisson", rate=1.0, duration=1.0)
    trace = gen_workload(store, params["profile"], arrival, n_jobs=1, seed=params["seed"])
    sim = LatencyModel(origin_rtt_s=params["rtt_ms"] / 1000.0)

    with OriginServer(store) as origin:
        direct = replay(
            trace, [f"origin:{origin.url}"], clock=sim, workers=params["workers"], origin=origin
        )
        proxy = CachingProxy(origin.url, work / "cache", ttl_override=math.inf)
        with ProxyServer(proxy) as pserver:
            replay(trace, [f"proxy:{pserver.url}"], clock=sim, workers=params["workers"])  # warm
            warm = replay(
                trace,
                [f"proxy:{pserver.url}"],
                clock=sim,
                workers=params["workers"],
                origin=origin,
                proxy=proxy,
            )
    speedup = direct.sim_wall_s / warm.sim_wall_s if warm.sim_wall_s else math.inf
    return {
        "queries_per_job": trace.n_events // trace.n_jobs,
        "bytes_per_job": trace.total_oracle_bytes // trace.n_jobs,
        "direct_sim_s": direct.sim_wall_s,
        "warm_sim_s": warm.sim_wall_s,
        "warm_hits": warm.cache_hits,
        "speedup": speedup,
        "speedup_ge_3": speedup >= 3.0,
        "wrong_results": direct.wrong_results + warm.wrong_results,
    }


def _cache_dedup(params: dict, work: Path) -> dict:
    store, _ = gen_store(params["preset"], params["seed"], work / "master")
    per_job = params["per_job"]
    n_jobs = params["total"] // per_job
    profile = WorkloadProfile(
        "dedup", n_queries=per_job, distinct_queries=params["distinct"]
    )
    arrival = ArrivalModel("poisson", rate=float(n_jobs), duration=1.0)
    trace = gen_workload(store, profile, arrival, n_jobs=n_jobs, seed=params["seed"])

    with OriginServer(store) as origin:
        proxy = CachingProxy(origin.url, work / "cache", ttl_override=math.inf)
        with ProxyServer(proxy) as pserver:
            metrics = replay(
                trace,
                [f"proxy:{pserver.url}"],
                clock="real",
                workers=params["workers"],
                origin=origin,
                proxy=proxy,
            )
    return {
        "total_queries": metrics.total_queries,
        "distinct_queries": trace.n_distinct,
        "origin_requests": metrics.origin_requests,
        "cache_hits": metrics.cache_hits,
        "hit_ratio": metrics.hit_ratio,
        "dedup_exact": metrics.origin_requests == trace.n_distinct,
        "wrong_results": metrics.wrong_results,
    }


def _failover_robustness(params: dict, work: Path) -> dict:
    store, _ = gen_store(params["preset"], params["seed"], work / "master")
    slice_path = work / "release.tar"
    build_slice(store, SliceSelection.everything(), slice_path)
    per_job = params["per_job"]
    n_jobs = params["events"] // per_job
    profile = WorkloadProfile("failover", n_queries=per_job, distinct_queries=per_job)
    arrival = ArrivalModel("poisson", rate=float(n_jobs), duration=1.0)
    trace = gen_workload(store, profile, arrival, n_jobs=n_jobs, seed=params["seed"])

    flap = FlapController(up_s=params["up_s"], down_s=params["down_s"])
    with OriginServer(store, flap=flap) as origin:
        metrics = replay(
            trace,
            [f"origin:{origin.url}", f"slice:{slice_path}"],
            clock="real",
            workers=params["workers"],
            origin=origin,
        )
    return {
        "events": metrics.total_queries,
        "wrong_results": metrics.wrong_results,
        "failures": metrics.failures,
        "served_by_origin": metrics.backend_counts.get("origin", 0),
        "served_by_slice": metrics.backend_counts.get("slice", 0),
        "real_wall_s": metrics.real_wall_s,
        "zero_wrong": metrics.wrong_results == 0 and metrics.failures == 0,
    }


def _fluctuation(params: dict, work: Path) -> dict:
    rng = np.random.default_rng(params["seed"])
    poisson = ArrivalModel("poisson", rate=params["rate"], duration=params["bins"])
    ratio_poisson = fluctuation_ratio(sample_bin_counts(poisson, params["bins"], rng))
    over = ArrivalModel(
        "overdispersed", rate=params["rate"], duration=params["bins"], dispersion=params["k"]
    )
    ratio_over = fluctuation_ratio(sample_bin_counts(over, params["bins"], rng))
    return {
        "poisson_ratio": ratio_poisson,
        "overdispersed_ratio": ratio_over,
        "poisson_within_0.2": abs(ratio_poisson - 1.0) <= 0.2,
        "overdispersed_within_1.5": abs(ratio_over - params["k"]) <= 1.5,
    }


@dataclass(frozen=True)
class _Scenario:
    name: str
    run: Callable[[dict, Path], dict]
    defaults: dict


SCENARIOS: dict[str, _Scenario] = {
    s.name: s
    for s in (
        _Scenario("empty", _empty, {"seed": 1}),
        _Scenario(
            "slice-attach",
            _slice_attach,
            {"seed": 7, "preset": "geometry", "profile": "geometry-job"},
        ),
        _Scenario(
            "frontier-speedup",
            _frontier_speedup,
            {"seed": 11, "preset": "reco", "profile": "reco-job", "rtt_ms": 50.0, "workers": 4},
        ),
        _Scenario(
            "cache-dedup",
            _cache_dedup,
            {
                "seed": 13,
                "preset": "tiny",
                "distinct": 500,
                "per_job": 1000,
                "total": 50000,
                "workers": 4,
            },
        ),
        _Scenario(
            "failover-robustness",
            _failover_robustness,
            {
                "seed": 17,
                "preset": "pool",
                "events": 100000,
                "per_job": 2000,
                "workers": 8,
                "up_s": 0.5,
                "down_s": 1.5,
            },
        ),
        _Scenario(
            "fluctuation",
            _fluctuation,
            {"seed": 19, "rate": 100.0, "bins": 10000, "k": 14.0},
        ),
    )
}


def parse_scenario_config(text: str) -> tuple[str, dict]:
    """Parse the versioned config document; returns (name, overrides)."""
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines or lines[0].strip() != SCENARIO_CONFIG_HEADER:
        raise ConfigError(f"config must start with {SCENARIO_CONFIG_HEADER!r}")
    raw: dict[str, str] = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"bad config line: {line!r}")
        raw[key.strip()] = value.strip()
    name = raw.pop("name", None)
    if name is None:
        raise ConfigError("config missing 'name'")
    return name, raw


def _coerce(value: str, like) -> object:
    if isinstance(like, bool):
        if value not in ("true", "false"):
            raise ConfigError(f"expected true/false, got {value!r}")
        return value == "true"
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def run_scenario(
    source: str | Path,
    out_dir: Optional[str | Path] = None,
    overrides: Optional[dict] = None,
) -> ScenarioReport:
    """Run a bundled scenario by name, or one described by a config file.

    Validation happens before any side effect; working data lives in a
    temporary directory unless `out_dir` is given, in which case the report
    files land there too.
    """
    raw_overrides: dict = dict(overrides or {})
    if isinstance(source, Path) or (isinstance(source, str) and source not in SCENARIOS):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"no such scenario or config file: {source}")
        name, file_overrides = parse_scenario_config(path.read_text())
        file_overrides.update({k: str(v) for k, v in raw_overrides.items()})
        raw_overrides = file_overrides
    else:
        name = str(source)
        raw_overrides = {k: str(v) for k, v in raw_overrides.items()}

    scenario = SCENARIOS.get(name)
    if scenario is None:
        raise ConfigError(f"unknown scenario: {name!r} (known: {sorted(SCENARIOS)})")
    params = dict(scenario.defaults)
    for key, value in raw_overrides.items():
        if key not in params:
            raise ConfigError(f"unknown parameter {key!r} for scenario {name!r}")
        params[key] = _coerce(value, params[key])

    keep_work = out_dir is not None
    work = Path(out_dir) / "work" if keep_work else Path(tempfile.mkdtemp(prefix="iov-scn-"))
    work.mkdir(parents=True, exist_ok=True)
    try:
        values = scenario.run(params, work)
    finally:
        if not keep_work:
            shutil.rmtree(work, ignore_errors=True)
    report = ScenarioReport(name=name, params=params, values=values)
    if out_dir is not None:
        report.save(out_dir)
    return report
