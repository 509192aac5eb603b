"""Read-through caching proxy keyed on canonical query URLs.

Cache behavior:
- MISS: fetch upstream, store body on disk under its validator (digest) name,
  serve. Concurrent misses for the same URL collapse into a single upstream
  fetch (per-URL single flight).
- HIT: entry fresh (now < expires_at, or infinite TTL) is served from disk
  after re-checking the body digest; a mismatch means disk corruption, the
  entry is dropped and the request handled as a MISS.
- REVALIDATED: entry expired, upstream answered 304 to If-None-Match with the
  stored validator; freshness window restarts without a body transfer.

Entries are evicted LRU by total byte budget. Upstream failures raise
UpstreamUnavailable so the failover client can move on; stale entries are
never served in that case.
"""

from __future__ import annotations

import hashlib
import http.client
import json
import os
import tempfile
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Callable, Optional
from urllib.parse import urlparse

from ..errors import UpstreamUnavailable
from .wire import (
    CACHE_STATUS_HEADER,
    CONTENT_TYPE,
    ORIGIN_HEADER,
    TTL_HEADER,
    TTL_INF,
    WireResponse,
    format_ttl,
    parse_ttl,
    quote_etag,
    unquote_etag,
)

HIT = "HIT"
MISS = "MISS"
REVALIDATED = "REVALIDATED"


@dataclass
class CacheEntry:
    url: str
    validator: str
    ttl: float
    origin_id: str
    stored_at: float
    expires_at: float  # TTL_INF for immutable responses
    size: int

    def fresh(self, now: float) -> bool:
        return now < self.expires_at

    def to_json(self) -> dict:
        return {
            "url": self.url,
            "validator": self.validator,
            "ttl": "inf" if self.ttl == TTL_INF else self.ttl,
            "origin_id": self.origin_id,
            "stored_at": self.stored_at,
            "expires_at": "inf" if self.expires_at == TTL_INF else self.expires_at,
            "size": self.size,
        }

    @classmethod
    def from_json(cls, d: dict) -> "CacheEntry":
        ttl = TTL_INF if d["ttl"] == "inf" else float(d["ttl"])
        expires = TTL_INF if d["expires_at"] == "inf" else float(d["expires_at"])
        return cls(
            d["url"], d["validator"], ttl, d["origin_id"], float(d["stored_at"]), expires, d["size"]
        )


@dataclass(frozen=True)
class _Upstream:
    host: str
    port: int


class CachingProxy:
    """Cache state plus upstream fetch logic; usable with or without HTTP serving."""

    def __init__(
        self,
        upstream_url: str,
        cache_dir: str | Path,
        *,
        byte_budget: int = 256 << 20,
        ttl_override: Optional[float] = None,
        clock: Callable[[], float] = time.monotonic,
        timeout: float = 30.0,
    ):
        parsed = urlparse(upstream_url)
        if parsed.scheme != "http" or not parsed.hostname:
            raise ValueError(f"upstream must be an http:// URL, got {upstream_url!r}")
        self.upstream = _Upstream(parsed.hostname, parsed.port or 80)
        self.cache_dir = Path(cache_dir)
        self.bodies_dir = self.cache_dir / "bodies"
        self.bodies_dir.mkdir(parents=True, exist_ok=True)
        self.byte_budget = byte_budget
        self.ttl_override = ttl_override
        self.clock = clock
        self.timeout = timeout

        self._index: OrderedDict[str, CacheEntry] = OrderedDict()
        self._body_refs: dict[str, int] = {}
        self._total_bytes = 0
        self._index_lock = threading.Lock()
        self._key_locks: dict[str, threading.Lock] = {}
        self._counters: dict[str, int] = {}
        self._counter_lock = threading.Lock()
        self._tls = threading.local()
        self._load_index()

    # -- counters -------------------------------------------------------------

    def _count(self, name: str) -> None:
        with self._counter_lock:
            self._counters[name] = self._counters.get(name, 0) + 1

    def counters(self) -> dict[str, int]:
        with self._counter_lock:
            return dict(self._counters)

    # -- persistence ------------------------------------------------------------

    def _load_index(self) -> None:
        path = self.cache_dir / "index.json"
        if not path.exists():
            return
        try:
            doc = json.loads(path.read_text())
        except ValueError:
            return
        for row in doc.get("entries", []):
            entry = CacheEntry.from_json(row)
            if (self.bodies_dir / entry.validator).exists():
                self._index[entry.url] = entry
                self._body_refs[entry.validator] = self._body_refs.get(entry.validator, 0) + 1
                self._total_bytes += entry.size

    def save_index(self) -> None:
        with self._index_lock:
            doc = {"entries": [e.to_json() for e in self._index.values()]}
        (self.cache_dir / "index.json").write_text(json.dumps(doc, sort_keys=True))

    # -- upstream ---------------------------------------------------------------

    def _conn(self) -> http.client.HTTPConnection:
        conn = getattr(self._tls, "conn", None)
        if conn is None:
            conn = http.client.HTTPConnection(
                self.upstream.host, self.upstream.port, timeout=self.timeout
            )
            self._tls.conn = conn
        return conn

    def _drop_conn(self) -> None:
        conn = getattr(self._tls, "conn", None)
        if conn is not None:
            conn.close()
            self._tls.conn = None

    def _upstream_get(self, url: str, etag: Optional[str] = None):
        """One upstream GET; returns (status, headers, body). Raises UpstreamUnavailable."""
        headers = {}
        if etag is not None:
            headers["If-None-Match"] = quote_etag(etag)
        self._count("upstream_requests")
        for attempt in (0, 1):  # one silent retry for a stale keep-alive socket
            conn = self._conn()
            try:
                conn.request("GET", url, headers=headers)
                resp = conn.getresponse()
                body = resp.read()
                if resp.status in (502, 503):
                    self._drop_conn()
                    raise UpstreamUnavailable(f"upstream answered {resp.status}")
                return resp.status, dict(resp.headers.items()), body
            except UpstreamUnavailable:
                raise
            except (OSError, http.client.HTTPException) as e:
                self._drop_conn()
                if attempt == 1:
                    raise UpstreamUnavailable(f"upstream unreachable: {e}") from e
        raise UpstreamUnavailable("unreachable")  # not reached

    # -- cache internals -----------------------------------------------------------

    def _body_path(self, validator: str) -> Path:
        return self.bodies_dir / validator

    def _key_lock(self, url: str) -> threading.Lock:
        with self._index_lock:
            lock = self._key_locks.get(url)
            if lock is None:
                lock = threading.Lock()
                self._key_locks[url] = lock
            return lock

    def _get_entry(self, url: str) -> Optional[CacheEntry]:
        with self._index_lock:
            entry = self._index.get(url)
            if entry is not None:
                self._index.move_to_end(url)
            return entry

    def _read_body_checked(self, entry: CacheEntry) -> Optional[bytes]:
        try:
            body = self._body_path(entry.validator).read_bytes()
        except OSError:
            return None
        if hashlib.sha256(body).hexdigest() != entry.validator:
            return None
        return body

    def _drop_entry(self, url: str) -> None:
        with self._index_lock:
            entry = self._index.pop(url, None)
            if entry is None:
                return
            self._total_bytes -= entry.size
            refs = self._body_refs.get(entry.validator, 0) - 1
            if refs <= 0:
                self._body_refs.pop(entry.validator, None)
                self._body_path(entry.validator).unlink(missing_ok=True)
            else:
                self._body_refs[entry.validator] = refs

    def _store(self, url: str, body: bytes, headers: dict) -> CacheEntry:
        validator = unquote_etag(headers.get("ETag")) or hashlib.sha256(body).hexdigest()
        ttl = parse_ttl(headers.get(TTL_HEADER)) if self.ttl_override is None else self.ttl_override
        now = self.clock()
        expires = TTL_INF if ttl == TTL_INF else now + ttl
        entry = CacheEntry(
            url=url,
            validator=validator,
            ttl=ttl,
            origin_id=headers.get(ORIGIN_HEADER, ""),
            stored_at=now,
            expires_at=expires,
            size=len(body),
        )
        path = self._body_path(validator)
        if not path.exists():
            # distinct URLs can share one body; give each writer its own tmp
            # file so concurrent stores of the same validator never collide
            fd, tmp_name = tempfile.mkstemp(dir=self.bodies_dir, suffix=".tmp")
            try:
                with os.fdopen(fd, "wb") as f:
                    f.write(body)
                os.replace(tmp_name, path)
            except OSError:
                Path(tmp_name).unlink(missing_ok=True)
                raise
        with self._index_lock:
            old = self._index.pop(url, None)
            if old is not None:
                self._total_bytes -= old.size
                old_refs = self._body_refs.get(old.validator, 0) - 1
                if old_refs <= 0 and old.validator != validator:
                    self._body_refs.pop(old.validator, None)
                    self._body_path(old.validator).unlink(missing_ok=True)
                else:
                    self._body_refs[old.validator] = old_refs
            self._index[url] = entry
            self._body_refs[validator] = self._body_refs.get(validator, 0) + 1
            self._total_bytes += entry.size
            # LRU eviction down to budget, never evicting what we just stored
            while self._total_bytes > self.byte_budget and len(self._index) > 1:
                victim_url, victim = next(iter(self._index.items()))
                if victim_url == url:
                    break
                self._index.popitem(last=False)
                self._total_bytes -= victim.size
                refs = self._body_refs.get(victim.validator, 0) - 1
                if refs <= 0:
                    self._body_refs.pop(victim.validator, None)
                    self._body_path(victim.validator).unlink(missing_ok=True)
                else:
                    self._body_refs[victim.validator] = refs
                self._count("evictions")
        return entry

    # -- the read-through operation ---------------------------------------------------

    def fetch(self, url: str) -> tuple[WireResponse, str]:
        """Serve `url`, consulting the cache first.

        Returns (WireResponse, cache_status); cache_status is HIT / MISS /
        REVALIDATED for 200 responses. Non-cacheable upstream statuses
        (400/404/...) pass through uncached as MISS.
        """
        with self._key_lock(url):
            now = self.clock()
            entry = self._get_entry(url)
            if entry is not None:
                if entry.fresh(now):
                    body = self._read_body_checked(entry)
                    if body is not None:
                        self._count("hits")
                        return self._wire(entry, body), HIT
                    self._count("corrupt_entries")
                    self._drop_entry(url)
                    entry = None
                else:
                    status, headers, body = self._upstream_get(url, etag=entry.validator)
                    if status == 304:
                        cached = self._read_body_checked(entry)
                        if cached is not None:
                            refreshed = self._refresh(url, entry, headers)
                            self._count("revalidated")
                            return self._wire(refreshed, cached), REVALIDATED
                        self._count("corrupt_entries")
                        self._drop_entry(url)
                        entry = None
                    elif status == 200:
                        stored = self._store(url, body, headers)
                        self._count("misses")
                        return self._wire(stored, body), MISS
                    else:
                        self._drop_entry(url)
                        self._count("upstream_errors")
                        return self._error_wire(status, headers, body), MISS

            status, headers, body = self._upstream_get(url)
            if status == 200:
                stored = self._store(url, body, headers)
                self._count("misses")
                return self._wire(stored, body), MISS
            self._count("upstream_errors")
            return self._error_wire(status, headers, body), MISS

    @staticmethod
    def _wire(entry: CacheEntry, body: bytes) -> WireResponse:
        return WireResponse(
            status=200,
            body=body,
            validator=entry.validator,
            ttl=entry.ttl,
            origin_id=entry.origin_id,
        )

    @staticmethod
    def _error_wire(status: int, headers: dict, body: bytes) -> WireResponse:
        return WireResponse(
            status=status,
            body=body,
            validator=hashlib.sha256(body).hexdigest(),
            ttl=0.0,
            origin_id=headers.get(ORIGIN_HEADER, ""),
        )

    def _refresh(self, url: str, entry: CacheEntry, headers: dict) -> CacheEntry:
        ttl = parse_ttl(headers.get(TTL_HEADER), default=entry.ttl)
        if self.ttl_override is not None:
            ttl = self.ttl_override
        now = self.clock()
        refreshed = CacheEntry(
            url=entry.url,
            validator=entry.validator,
            ttl=ttl,
            origin_id=headers.get(ORIGIN_HEADER, entry.origin_id),
            stored_at=now,
            expires_at=TTL_INF if ttl == TTL_INF else now + ttl,
            size=entry.size,
        )
        with self._index_lock:
            self._index[url] = refreshed
            self._index.move_to_end(url)
        return refreshed

    def close(self) -> None:
        self.save_index()
        self._drop_conn()


class _ProxyHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class _ProxyHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        pass

    def do_GET(self):
        proxy: CachingProxy = self.server.proxy  # type: ignore[attr-defined]
        if self.path == "/v1/stats":
            text = "".join(f"{k}={v}\n" for k, v in sorted(proxy.counters().items()))
            data = text.encode()
            self.send_response(200)
            self.send_header("Content-Type", "text/plain")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
            return
        try:
            resp, cache_status = proxy.fetch(self.path)
        except UpstreamUnavailable as e:
            data = str(e).encode()
            self.send_response(502)
            self.send_header("Content-Type", "text/plain")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
            return
        self.send_response(resp.status)
        if resp.status == 200:
            self.send_header("Content-Type", CONTENT_TYPE)
            self.send_header("ETag", quote_etag(resp.validator))
            self.send_header(TTL_HEADER, format_ttl(resp.ttl))
            self.send_header(ORIGIN_HEADER, resp.origin_id)
            self.send_header(CACHE_STATUS_HEADER, cache_status)
        self.send_header("Content-Length", str(len(resp.body)))
        self.end_headers()
        self.wfile.write(resp.body)


class ProxyServer:
    """HTTP surface over CachingProxy; start()/stop() manage a daemon thread."""

    def __init__(self, proxy: CachingProxy, host: str = "127.0.0.1", port: int = 0):
        self.proxy = proxy
        self._server = _ProxyHTTPServer((host, port), _ProxyHandler)
        self._server.proxy = proxy  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ProxyServer":
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="iov-proxy", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
        self.proxy.close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
