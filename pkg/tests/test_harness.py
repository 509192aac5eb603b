"""Harness tests: deterministic generation, workload shapes, replay metrics."""

import math

import numpy as np
import pytest

from iovstore.errors import ConfigError, InsufficientData, UnreachableByteTarget
from iovstore.harness import (
    ArrivalModel,
    LatencyModel,
    PROFILES,
    WorkloadProfile,
    fluctuation_ratio,
    gen_store,
    gen_workload,
    replay,
    run_scenario,
    sample_bin_counts,
)
from iovstore.harness.arrivals import arrival_times, bin_counts
from iovstore.harness.scenario import SCENARIOS, parse_scenario_config
from iovstore.cachetier import CachingProxy, OriginServer, ProxyServer
from iovstore.release import build_slice
from iovstore.snapshot import SliceSelection

ARRIVAL = ArrivalModel("poisson", rate=10.0, duration=1.0)


class TestGenStore:
    def test_determinism_across_runs(self, tmp_path):
        _, r1 = gen_store("tiny", 42, tmp_path / "a")
        _, r2 = gen_store("tiny", 42, tmp_path / "b")
        assert r1.state_digest == r2.state_digest
        assert r1.store_id == r2.store_id

    def test_different_seeds_differ(self, tmp_path):
        _, r1 = gen_store("tiny", 1, tmp_path / "a")
        _, r2 = gen_store("tiny", 2, tmp_path / "b")
        assert r1.state_digest != r2.state_digest

    def test_minimal_spec(self, tmp_path):
        store, report = gen_store("minimal", 0, tmp_path / "m")
        assert report.n_folders == 1 and report.n_records == 1
        assert len(store.sequences()) == 1

    def test_reports_actual_counts(self, tmp_path):
        store, report = gen_store("tiny", 7, tmp_path / "t")
        assert report.n_folders == len(store.folder_paths()) == 40
        assert report.n_records == sum(len(s.records) for s in store.sequences())


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    return gen_store("tiny", 42, tmp_path_factory.mktemp("ws") / "s")[0]


@pytest.fixture(scope="module")
def rig(tmp_path_factory):
    base = tmp_path_factory.mktemp("replay")
    store, _ = gen_store("tiny", 11, base / "s")
    slice_path = base / "s.tar"
    build_slice(store, SliceSelection.everything(), slice_path)
    profile = WorkloadProfile("p", n_queries=100, distinct_queries=30)
    trace = gen_workload(store, profile, ARRIVAL, n_jobs=3, seed=2)
    return store, slice_path, trace, base


class TestGenWorkload:
    def test_per_job_query_count_exact(self, tiny):
        profile = WorkloadProfile("p", n_queries=250)
        trace = gen_workload(tiny, profile, ARRIVAL, n_jobs=4, seed=5)
        assert trace.n_events == 1000
        counts = np.bincount(trace.job_ids)
        assert list(counts) == [250] * 4

    def test_deterministic_from_seed(self, tiny):
        t1 = gen_workload(tiny, "geometry-job", ARRIVAL, n_jobs=1, seed=9)
        t2 = gen_workload(tiny, "geometry-job", ARRIVAL, n_jobs=1, seed=9)
        assert t1.oracle_digests == t2.oracle_digests
        assert (t1.query_idx == t2.query_idx).all()
        assert t1.queries == t2.queries

    def test_distinct_pool_size(self, tiny):
        profile = WorkloadProfile("p", n_queries=300, distinct_queries=40)
        trace = gen_workload(tiny, profile, ARRIVAL, n_jobs=2, seed=5)
        assert trace.n_distinct == 40
        assert set(trace.query_idx) <= set(range(40))

    def test_unreachable_byte_target(self, tiny):
        profile = WorkloadProfile("p", n_queries=10, target_bytes=10**12)
        with pytest.raises(UnreachableByteTarget):
            gen_workload(tiny, profile, ARRIVAL, n_jobs=1, seed=5)

    def test_times_non_decreasing(self, tiny):
        trace = gen_workload(tiny, "geometry-job", ARRIVAL, n_jobs=5, seed=3)
        assert (np.diff(trace.times) >= 0).all()

    def test_profile_catalog_matches_measured_jobs(self):
        assert PROFILES["geometry-job"].n_queries == 3000
        assert PROFILES["reco-job"].n_queries == 11000
        assert PROFILES["reco-job"].target_bytes == 70_000_000
        assert PROFILES["cms-job"].target_bytes == 60_000_000
        assert PROFILES["lhcb-job"].target_bytes == 40_000_000


class TestArrivals:
    def test_constant_series_ratio_zero(self):
        assert fluctuation_ratio([7] * 100) == 0.0

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            fluctuation_ratio([1, 2, 3])

    def test_poisson_ratio_near_one(self):
        rng = np.random.default_rng(1)
        model = ArrivalModel("poisson", rate=50.0, duration=2000.0)
        ratio = fluctuation_ratio(sample_bin_counts(model, 2000, rng))
        assert abs(ratio - 1.0) < 0.2

    def test_overdispersed_hits_target(self):
        rng = np.random.default_rng(2)
        model = ArrivalModel("overdispersed", rate=100.0, duration=5000.0, dispersion=5.0)
        ratio = fluctuation_ratio(sample_bin_counts(model, 5000, rng))
        assert abs(ratio - 5.0) < 0.5

    def test_arrival_times_count_and_range(self):
        rng = np.random.default_rng(3)
        model = ArrivalModel("overdispersed", rate=10.0, duration=100.0, dispersion=3.0)
        times = arrival_times(model, 500, rng)
        assert len(times) == 500
        assert times.min() >= 0 and times.max() < 100.0
        assert (np.diff(times) >= 0).all()

    def test_bin_counts_histogram(self):
        counts = bin_counts([0.5, 1.5, 1.6, 9.9], duration=10.0, bin_width=1.0)
        assert counts.sum() == 4 and counts[1] == 2

    def test_model_validation(self):
        with pytest.raises(ValueError):
            ArrivalModel("poisson", rate=0, duration=1)
        with pytest.raises(ValueError):
            ArrivalModel("overdispersed", rate=1, duration=1, dispersion=0.5)
        with pytest.raises(ValueError):
            ArrivalModel("weird", rate=1, duration=1)


class TestReplay:
    def test_slice_replay_validates_and_counts(self, rig):
        _, slice_path, trace, _ = rig
        metrics = replay(trace, [f"slice:{slice_path}"], clock="real", workers=2)
        assert metrics.total_queries == trace.n_events == 300
        assert metrics.wrong_results == 0 and metrics.failures == 0
        assert metrics.bytes_read == trace.total_oracle_bytes
        assert metrics.backend_counts == {"slice": 300}

    def test_origin_and_slice_return_same_bytes(self, rig):
        store, slice_path, trace, _ = rig
        with OriginServer(store) as origin:
            m_origin = replay(trace, [f"origin:{origin.url}"], workers=2, origin=origin)
        m_slice = replay(trace, [f"slice:{slice_path}"], workers=2)
        assert m_origin.wrong_results == m_slice.wrong_results == 0
        assert m_origin.bytes_read == m_slice.bytes_read

    def test_metrics_conservation_through_proxy(self, rig):
        store, _, trace, base = rig
        with OriginServer(store) as origin:
            proxy = CachingProxy(origin.url, base / "cache1", ttl_override=math.inf)
            with ProxyServer(proxy) as pserver:
                metrics = replay(
                    trace, [f"proxy:{pserver.url}"], workers=2, origin=origin, proxy=proxy
                )
        assert metrics.origin_requests == trace.n_distinct
        assert metrics.cache_hits + metrics.cache_misses == metrics.total_queries
        assert metrics.hit_ratio == 1.0 - metrics.origin_requests / metrics.total_queries

    def test_sim_clock_charges_by_backend(self, rig):
        _, slice_path, trace, _ = rig
        sim = LatencyModel(slice_s=0.001, disk_bandwidth=math.inf)
        metrics = replay(trace, [f"slice:{slice_path}"], clock=sim, workers=2)
        assert metrics.sim_wall_s == pytest.approx(0.001 * trace.n_events, rel=1e-6)


class TestScenarios:
    def test_empty_scenario(self, tmp_path):
        report = run_scenario("empty", out_dir=tmp_path / "out")
        assert report.values["total_queries"] == 0
        kv = (tmp_path / "out" / "report.kv").read_text()
        assert "scenario=empty\n" in kv and "total_queries=0\n" in kv

    def test_config_file_round_trip(self, tmp_path):
        config = tmp_path / "c.cfg"
        config.write_text("iovstore-scenario-v1\nname = fluctuation\nbins = 2000\nseed = 3\n")
        report = run_scenario(config)
        assert report.params["bins"] == 2000 and report.params["seed"] == 3

    def test_unknown_scenario_and_keys_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            run_scenario("nonesuch")
        with pytest.raises(ConfigError):
            run_scenario("empty", overrides={"bogus": "1"})
        config = tmp_path / "c.cfg"
        config.write_text("not-a-config\n")
        with pytest.raises(ConfigError):
            run_scenario(config)

    def test_parse_rejects_bad_lines(self):
        with pytest.raises(ConfigError):
            parse_scenario_config("iovstore-scenario-v1\njust a line\n")
        with pytest.raises(ConfigError):
            parse_scenario_config("iovstore-scenario-v1\nseed = 1\n")  # no name

    def test_every_scenario_is_registered_with_defaults(self):
        assert set(SCENARIOS) == {
            "empty",
            "slice-attach",
            "frontier-speedup",
            "cache-dedup",
            "failover-robustness",
            "fluctuation",
        }
        for scenario in SCENARIOS.values():
            assert isinstance(scenario.defaults, dict)

    def test_fluctuation_scenario_values(self):
        report = run_scenario("fluctuation", overrides={"bins": "3000"})
        assert report.values["poisson_within_0.2"] is True
        assert report.values["overdispersed_within_1.5"] is True
