"""Trace replay against any backend configuration, with oracle validation.

Every event is really executed through the failover client; the response's
validator is compared against the digest frozen at generation time, so a
replay distinguishes wrong bytes (counted as wrong_results) from per-query
failures (counted, not fatal) from total backend loss (AllBackendsFailed,
which aborts). Jobs run on parallel workers; each job's queries stay serial.

Wall time is measured two ways:
- real: actual elapsed seconds per job;
- simulated: a LatencyModel charges each query by the backend that answered
  it (origin RTT and WAN bandwidth for direct or proxy-miss reads, LAN cost
  for proxy hits, local cost for slice reads), standing in for the distance
  between the job and the conditions database.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from ..cachetier.client import ConditionsClient, Endpoint
from ..errors import AllBackendsFailed
from .generate import Trace


@dataclass(frozen=True)
class LatencyModel:
    """Fixed RTT + bandwidth charge at each tier boundary."""

    origin_rtt_s: float = 0.050
    proxy_rtt_s: float = 0.0005
    slice_s: float = 0.00005
    wan_bandwidth: float = 10e6  # bytes/s to the remote origin site
    lan_bandwidth: float = 125e6  # bytes/s to a site-local proxy
    disk_bandwidth: float = 500e6

    def latency(self, backend_kind: str, cache_status: str, nbytes: int) -> float:
        if backend_kind == "slice":
            return self.slice_s + nbytes / self.disk_bandwidth
        if backend_kind == "origin":
            return self.origin_rtt_s + nbytes / self.wan_bandwidth
        # proxy: hits stay on the LAN; misses and revalidations also pay the
        # upstream round trip
        cost = self.proxy_rtt_s + nbytes / self.lan_bandwidth
        if cache_status in ("MISS", "REVALIDATED"):
            cost += self.origin_rtt_s
            if cache_status == "MISS":
                cost += nbytes / self.wan_bandwidth
        return cost


@dataclass
class Metrics:
    total_queries: int = 0
    bytes_read: int = 0
    failures: int = 0
    wrong_results: int = 0
    origin_requests: int = -1  # -1: no origin counter attached
    cache_hits: int = 0
    cache_misses: int = 0
    cache_revalidated: int = 0
    backend_counts: dict = field(default_factory=dict)
    job_wall_p50_s: float = 0.0
    job_wall_p95_s: float = 0.0
    job_wall_max_s: float = 0.0
    sim_wall_s: float = 0.0  # sum of per-job simulated walls; 0 under real clock
    real_wall_s: float = 0.0

    @property
    def hit_ratio(self) -> float:
        proxied = self.cache_hits + self.cache_misses + self.cache_revalidated
        if proxied:
            return self.cache_hits / proxied
        if self.origin_requests >= 0 and self.total_queries:
            return 1.0 - self.origin_requests / self.total_queries
        return 0.0

    def to_machine(self) -> str:
        rows = {
            "backend_counts": ",".join(
                f"{k}:{v}" for k, v in sorted(self.backend_counts.items())
            ),
            "bytes_read": self.bytes_read,
            "cache_hits": self.cache_hits,
            "cache_misses": self.cache_misses,
            "cache_revalidated": self.cache_revalidated,
            "failures": self.failures,
            "hit_ratio": f"{self.hit_ratio:.6f}",
            "job_wall_max_s": f"{self.job_wall_max_s:.6f}",
            "job_wall_p50_s": f"{self.job_wall_p50_s:.6f}",
            "job_wall_p95_s": f"{self.job_wall_p95_s:.6f}",
            "origin_requests": self.origin_requests,
            "real_wall_s": f"{self.real_wall_s:.6f}",
            "sim_wall_s": f"{self.sim_wall_s:.6f}",
            "total_queries": self.total_queries,
            "wrong_results": self.wrong_results,
        }
        return "".join(f"{k}={v}\n" for k, v in sorted(rows.items()))


def replay(
    trace: Trace,
    endpoints: Sequence[Union[Endpoint, str]],
    clock: Union[str, LatencyModel] = "real",
    *,
    workers: int = 4,
    origin=None,
    proxy=None,
    timeout: float = 30.0,
) -> Metrics:
    """Execute every trace event; returns complete Metrics.

    `clock` is "real" or a LatencyModel. `origin` / `proxy` may be the
    OriginServer / CachingProxy involved so their counters land in the
    metrics. Per-query failures are counted; AllBackendsFailed propagates.
    """
    sim: Optional[LatencyModel] = None if clock == "real" else clock
    client = ConditionsClient(endpoints, timeout=timeout)
    job_indices = trace.job_event_indices()
    origin_before = origin.query_count if origin is not None else None

    def run_job(event_ids: np.ndarray):
        wall_start = time.perf_counter()
        sim_wall = 0.0
        nbytes = 0
        wrong = 0
        failed = 0
        statuses: dict[str, int] = {}
        backends: dict[str, int] = {}
        for event_id in event_ids:
            qidx = int(trace.query_idx[event_id])
            try:
                r = client.read(trace.queries[qidx])
            except AllBackendsFailed:
                raise
            except Exception:
                failed += 1
                continue
            if r.validator != trace.oracle_digests[qidx]:
                wrong += 1
            nbytes += len(r.body)
            statuses[r.cache_status] = statuses.get(r.cache_status, 0) + 1
            backends[r.backend_kind] = backends.get(r.backend_kind, 0) + 1
            if sim is not None:
                sim_wall += sim.latency(r.backend_kind, r.cache_status, len(r.body))
                sim_wall += trace.think_time_s
        return (
            time.perf_counter() - wall_start,
            sim_wall,
            nbytes,
            wrong,
            failed,
            statuses,
            backends,
        )

    metrics = Metrics(total_queries=trace.n_events)
    t0 = time.perf_counter()
    job_walls = []
    try:
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            for real_wall, sim_wall, nbytes, wrong, failed, statuses, backends in pool.map(
                run_job, job_indices.values()
            ):
                job_walls.append(sim_wall if sim is not None else real_wall)
                metrics.sim_wall_s += sim_wall
                metrics.bytes_read += nbytes
                metrics.wrong_results += wrong
                metrics.failures += failed
                metrics.cache_hits += statuses.get("HIT", 0)
                metrics.cache_misses += statuses.get("MISS", 0)
                metrics.cache_revalidated += statuses.get("REVALIDATED", 0)
                for k, v in backends.items():
                    metrics.backend_counts[k] = metrics.backend_counts.get(k, 0) + v
    finally:
        client.close()
    metrics.real_wall_s = time.perf_counter() - t0

    if job_walls:
        walls = np.asarray(job_walls)
        metrics.job_wall_p50_s = float(np.percentile(walls, 50))
        metrics.job_wall_p95_s = float(np.percentile(walls, 95))
        metrics.job_wall_max_s = float(walls.max())
    if origin_before is not None:
        metrics.origin_requests = origin.query_count - origin_before
    if proxy is not None:
        counters = proxy.counters()
        # the proxy's own ledger should agree with what the client observed
        metrics.backend_counts.setdefault("proxy_upstream", counters.get("upstream_requests", 0))
    return metrics
