"""Cache tier tests: origin wire behavior, proxy caching, failover client."""

import hashlib
import http.client
import threading

import pytest

from iovstore.cachetier import (
    CachingProxy,
    ConditionsClient,
    Endpoint,
    FlapController,
    OriginServer,
    ProxyServer,
    parse_endpoint,
)
from iovstore.cachetier.proxy import HIT, MISS, REVALIDATED
from iovstore.errors import AllBackendsFailed, UpstreamUnavailable
from iovstore.query import CanonicalQuery, canonical_url, decode_result_set, encode_result_set
from iovstore.release import build_slice
from iovstore.snapshot import SliceSelection
from iovstore.store import CommitRequest


Q1 = CanonicalQuery.point("det/a/f1", 0, "", "GLOBAL-A", 150)
Q2 = CanonicalQuery.point("det/a/f2", 0, "", "GLOBAL-A", 700)


@pytest.fixture
def origin(demo_store):
    server = OriginServer(demo_store, origin_id="test-origin").start()
    yield server
    server.stop()


def http_get(url_base: str, path: str, headers=None):
    from urllib.parse import urlparse

    parsed = urlparse(url_base)
    conn = http.client.HTTPConnection(parsed.hostname, parsed.port, timeout=10)
    try:
        conn.request("GET", path, headers=headers or {})
        resp = conn.getresponse()
        return resp.status, dict(resp.headers.items()), resp.read()
    finally:
        conn.close()


class FakeClock:
    def __init__(self):
        self.now = 1000.0

    def __call__(self):
        return self.now

    def advance(self, dt):
        self.now += dt


class TestOrigin:
    def test_known_query_decodes(self, demo_store, origin):
        status, headers, body = http_get(origin.url, canonical_url(Q1))
        assert status == 200
        assert decode_result_set(body) == demo_store.read_query(Q1)
        assert headers["ETag"] == f'"{hashlib.sha256(body).hexdigest()}"'
        assert headers["X-IOV-Origin"] == "test-origin"

    def test_malformed_url_400(self, origin):
        status, _, _ = http_get(origin.url, "/v1/q?nope")
        assert status == 400

    def test_unknown_folder_404(self, origin):
        q = CanonicalQuery.point("no/folder", 0, "no/folder", "v1", 1)
        status, _, body = http_get(origin.url, canonical_url(q))
        assert status == 404 and b"UnknownFolder" in body

    def test_repeat_requests_byte_identical(self, origin):
        _, h1, b1 = http_get(origin.url, canonical_url(Q1))
        _, h2, b2 = http_get(origin.url, canonical_url(Q1))
        assert b1 == b2 and h1["ETag"] == h2["ETag"]

    def test_if_none_match_304(self, origin):
        _, headers, _ = http_get(origin.url, canonical_url(Q1))
        status, h2, body = http_get(
            origin.url, canonical_url(Q1), {"If-None-Match": headers["ETag"]}
        )
        assert status == 304 and body == b"" and h2["ETag"] == headers["ETag"]

    def test_master_backend_finite_ttl_slice_infinite(self, demo_store, tmp_path, origin):
        _, headers, _ = http_get(origin.url, canonical_url(Q1))
        assert headers["X-IOV-TTL"] == "300"
        slice_path = tmp_path / "s.tar"
        build_slice(demo_store, SliceSelection.everything(), slice_path)
        from iovstore.release import open_slice

        with open_slice(slice_path) as handle:
            with OriginServer(handle) as slice_origin:
                _, headers, _ = http_get(slice_origin.url, canonical_url(Q1))
                assert headers["X-IOV-TTL"] == "inf"

    def test_flap_returns_503(self, demo_store):
        clock = FakeClock()
        flap = FlapController(up_s=10, down_s=10, clock=clock)
        with OriginServer(demo_store, flap=flap) as server:
            status, _, _ = http_get(server.url, canonical_url(Q1))
            assert status == 200
            clock.advance(15)  # into the down window
            status, _, _ = http_get(server.url, canonical_url(Q1))
            assert status == 503


class TestProxy:
    def test_cold_then_hit_one_upstream_request(self, origin, tmp_path):
        proxy = CachingProxy(origin.url, tmp_path / "c")
        url = canonical_url(Q1)
        r1, s1 = proxy.fetch(url)
        r2, s2 = proxy.fetch(url)
        assert (s1, s2) == (MISS, HIT)
        assert r1.body == r2.body and r1.validator == r2.validator
        assert origin.query_count == 1

    def test_expiry_revalidates_not_modified(self, origin, tmp_path):
        clock = FakeClock()
        proxy = CachingProxy(origin.url, tmp_path / "c", clock=clock)
        url = canonical_url(Q1)
        proxy.fetch(url)
        clock.advance(301)  # past the 300 s TTL
        resp, cache_status = proxy.fetch(url)
        assert resp.status == 200 and cache_status == REVALIDATED
        assert origin.counters()["not_modified"] == 1
        # freshness window restarted: next fetch is a HIT again
        assert proxy.fetch(url)[1] == HIT

    def test_corrupt_cached_body_treated_as_miss(self, origin, tmp_path):
        proxy = CachingProxy(origin.url, tmp_path / "c")
        url = canonical_url(Q1)
        resp, _ = proxy.fetch(url)
        validator = resp.validator
        body_file = proxy._body_path(validator)
        raw = bytearray(body_file.read_bytes())
        raw[0] ^= 0xFF
        body_file.write_bytes(bytes(raw))
        resp2, cache_status = proxy.fetch(url)
        assert resp2.status == 200 and cache_status == MISS  # refetched
        assert resp2.body == resp.body
        assert proxy.counters()["corrupt_entries"] == 1

    def test_upstream_unavailable_propagates(self, tmp_path):
        proxy = CachingProxy("http://127.0.0.1:1", tmp_path / "c", timeout=1)
        with pytest.raises(UpstreamUnavailable):
            proxy.fetch("/v1/q?f=x&c=0&s=x&g=T&m=p&t=1")

    def test_single_flight_collapses_concurrent_misses(self, origin, tmp_path):
        proxy = CachingProxy(origin.url, tmp_path / "c")
        url = canonical_url(Q2)
        results = []
        barrier = threading.Barrier(8)

        def worker():
            barrier.wait()
            results.append(proxy.fetch(url)[1])

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert origin.query_count == 1
        assert sorted(results) == [HIT] * 7 + [MISS]

    def test_lru_eviction_by_byte_budget(self, demo_store, origin, tmp_path):
        # budget fits roughly two bodies; the least recently used must go
        bodies = {}
        for folder, ch, t in (("det/a/f1", 0, 1), ("det/a/f1", 1, 1), ("det/a/f2", 0, 1)):
            q = CanonicalQuery.point(folder, ch, "", "GLOBAL-A", t)
            bodies[canonical_url(q)] = len(encode_result_set(demo_store.read_query(q)))
        budget = max(bodies.values()) * 2 + 10
        proxy = CachingProxy(origin.url, tmp_path / "c", byte_budget=budget)
        urls = list(bodies)
        for url in urls:
            proxy.fetch(url)
        assert proxy.counters().get("evictions", 0) >= 1
        statuses = {url: proxy.fetch(url)[1] for url in urls}
        assert statuses[urls[0]] == MISS  # the oldest was evicted

    def test_index_survives_restart(self, origin, tmp_path):
        url = canonical_url(Q1)
        proxy = CachingProxy(origin.url, tmp_path / "c")
        proxy.fetch(url)
        proxy.close()
        proxy2 = CachingProxy(origin.url, tmp_path / "c")
        assert proxy2.fetch(url)[1] == HIT
        assert origin.query_count == 1


class TestClient:
    def test_endpoint_parsing(self):
        e = parse_endpoint("origin:http://127.0.0.1:9999")
        assert e == Endpoint("origin", "http://127.0.0.1:9999")
        with pytest.raises(ValueError):
            parse_endpoint("bogus")
        with pytest.raises(ValueError):
            parse_endpoint("weird:http://x")

    def test_origin_only_equals_direct_read(self, demo_store, origin):
        with ConditionsClient([f"origin:{origin.url}"]) as client:
            result = client.read(Q1)
        assert result.result_set == demo_store.read_query(Q1)
        assert result.backend_kind == "origin"

    def test_dead_proxy_fails_over_to_origin(self, demo_store, origin):
        endpoints = ["proxy:http://127.0.0.1:1", f"origin:{origin.url}"]
        with ConditionsClient(endpoints, timeout=1) as client:
            result = client.read(Q1)
        assert result.backend_kind == "origin"
        assert result.result_set == demo_store.read_query(Q1)

    def test_three_backend_consistency(self, demo_store, origin, tmp_path):
        # cold proxy, dead origin behind it, slice as last resort
        slice_path = tmp_path / "s.tar"
        build_slice(demo_store, SliceSelection.everything(), slice_path)
        dead_upstream_proxy = CachingProxy("http://127.0.0.1:1", tmp_path / "c", timeout=1)
        with ProxyServer(dead_upstream_proxy) as pserver:
            endpoints = [
                f"proxy:{pserver.url}",
                "origin:http://127.0.0.1:1",
                f"slice:{slice_path}",
            ]
            with ConditionsClient(endpoints, timeout=1) as client:
                result = client.read(Q1)
        assert result.backend_kind == "slice"
        assert result.body == encode_result_set(demo_store.read_query(Q1))

    def test_availability_permutation_never_changes_bytes(self, demo_store, origin, tmp_path):
        slice_path = tmp_path / "s.tar"
        build_slice(demo_store, SliceSelection.everything(), slice_path)
        proxy = CachingProxy(origin.url, tmp_path / "c")
        with ProxyServer(proxy) as pserver:
            combos = [
                [f"origin:{origin.url}"],
                [f"proxy:{pserver.url}", f"origin:{origin.url}"],
                ["proxy:http://127.0.0.1:1", f"origin:{origin.url}"],
                ["origin:http://127.0.0.1:1", f"slice:{slice_path}"],
                [f"slice:{slice_path}"],
            ]
            bodies = set()
            for endpoints in combos:
                with ConditionsClient(endpoints, timeout=1) as client:
                    bodies.add(client.read(Q1).body)
        assert len(bodies) == 1

    def test_all_backends_failed_aggregates_causes(self):
        endpoints = ["proxy:http://127.0.0.1:1", "origin:http://127.0.0.1:2"]
        with ConditionsClient(endpoints, timeout=1) as client:
            with pytest.raises(AllBackendsFailed) as excinfo:
                client.read(Q1)
        assert len(excinfo.value.causes) == 2

    def test_corrupt_http_body_detected_and_failed_over(self, demo_store, origin, tmp_path):
        # a proxy that skips its own digest check and serves tampered bytes:
        # the client sees validator != sha256(body), rejects, and fails over
        proxy = CachingProxy(origin.url, tmp_path / "c")
        url = canonical_url(Q1)
        resp, _ = proxy.fetch(url)
        proxy.close()  # persist the index so the next proxy reuses the entry
        validator = resp.validator
        (tmp_path / "c" / "bodies" / validator).write_bytes(b"not the real body")

        class LyingProxy(CachingProxy):
            def _read_body_checked(self, e):  # no proxy-side integrity check
                try:
                    return self._body_path(e.validator).read_bytes()
                except OSError:
                    return None

        lying = LyingProxy(origin.url, tmp_path / "c")
        assert lying.fetch(url)[1] == HIT  # it really does serve the bad bytes
        with ProxyServer(lying) as pserver:
            endpoints = [f"proxy:{pserver.url}", f"origin:{origin.url}"]
            with ConditionsClient(endpoints) as client:
                result = client.read(Q1)
        assert result.backend_kind == "origin"
        assert result.result_set == demo_store.read_query(Q1)
