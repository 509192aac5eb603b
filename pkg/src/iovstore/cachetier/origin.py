"""HTTP origin: the translation layer between canonical URLs and a read view.

Serves GET /v1/q?...  with the deterministic result-set body, so two requests
against an unchanged backend always get byte-identical bodies and validators.
Master-backed origins default to a 300 s TTL; snapshot/slice-backed origins
are immutable and advertise an infinite TTL.

A FlapController can be attached to emulate an unreliable backend: during its
down windows the handler answers 503 and drops the connection, which is what
the failover client must survive.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable, Optional, Union

from ..errors import MalformedQuery, ResolutionError
from ..query import body_validator, parse_canonical_url
from ..snapshot import SnapshotView
from ..views import ConditionsRead
from .wire import (
    CACHE_STATUS_HEADER,
    CONTENT_TYPE,
    ORIGIN_HEADER,
    TTL_HEADER,
    TTL_INF,
    format_ttl,
    quote_etag,
    unquote_etag,
)


@dataclass
class FlapController:
    """Deterministic up/down schedule driven by a monotonic clock.

    `hard` drops the connection on every down-window request; the default
    soft mode answers 503 over the kept-alive connection, which is cheaper
    and just as dead from the client's point of view.
    """

    up_s: float
    down_s: float
    clock: Callable[[], float] = time.monotonic
    hard: bool = False
    _t0: float = field(init=False)

    def __post_init__(self):
        if self.up_s <= 0 or self.down_s < 0:
            raise ValueError("flap windows must be positive")
        self._t0 = self.clock()

    def is_up(self) -> bool:
        period = self.up_s + self.down_s
        if period == 0:
            return True
        return (self.clock() - self._t0) % period < self.up_s


class _OriginHTTPServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True


class _Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def do_GET(self):
        origin: "OriginServer" = self.server.origin  # type: ignore[attr-defined]
        flap = origin.flap
        if flap is not None and not flap.is_up():
            origin.count("flapped")
            self.send_response(503)
            self.send_header("Content-Length", "0")
            if flap.hard:
                self.send_header("Connection", "close")
                self.close_connection = True
            self.end_headers()
            return

        if origin.sim_rtt_s > 0:
            time.sleep(origin.sim_rtt_s)

        if self.path == "/v1/ping":
            self._send_text(200, "ok")
            return
        if self.path == "/v1/stats":
            self._send_text(200, origin.stats_text())
            return
        if not self.path.startswith("/v1/q"):
            self._send_text(404, "unknown path")
            return
        origin.count("queries")
        try:
            q = parse_canonical_url(self.path)
        except MalformedQuery as e:
            origin.count("malformed")
            self._send_text(400, f"MalformedQuery: {e}")
            return
        try:
            body = origin.body_for(self.path, q)
        except ResolutionError as e:
            origin.count("not_found")
            self._send_text(404, f"{type(e).__name__}: {e}")
            return
        except Exception as e:  # anything else is a server fault, not a logic error
            origin.count("errors")
            self._send_text(500, f"internal error: {type(e).__name__}: {e}")
            return

        validator = body_validator(body)
        if unquote_etag(self.headers.get("If-None-Match")) == validator:
            origin.count("not_modified")
            self.send_response(304)
            self.send_header("ETag", quote_etag(validator))
            self.send_header(TTL_HEADER, format_ttl(origin.ttl))
            self.send_header(ORIGIN_HEADER, origin.origin_id)
            self.send_header("Content-Length", "0")
            self.end_headers()
            return

        origin.count("served")
        self.send_response(200)
        self.send_header("Content-Type", CONTENT_TYPE)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("ETag", quote_etag(validator))
        self.send_header(TTL_HEADER, format_ttl(origin.ttl))
        self.send_header(ORIGIN_HEADER, origin.origin_id)
        if origin.ttl != TTL_INF:
            self.send_header("Cache-Control", f"max-age={int(origin.ttl)}")
        self.send_header(CACHE_STATUS_HEADER, "ORIGIN")
        self.end_headers()
        self.wfile.write(body)

    def _send_text(self, status: int, text: str):
        data = text.encode()
        self.send_response(status)
        self.send_header("Content-Type", "text/plain")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)


class OriginServer:
    """Read view behind an HTTP surface; start()/stop() manage a daemon thread."""

    DEFAULT_MASTER_TTL = 300.0

    def __init__(
        self,
        backend: ConditionsRead,
        host: str = "127.0.0.1",
        port: int = 0,
        *,
        ttl: Optional[Union[float, str]] = None,
        origin_id: Optional[str] = None,
        sim_rtt_s: float = 0.0,
        flap: Optional[FlapController] = None,
    ):
        self.backend = backend
        if ttl is None:
            # immutable backends are safely cacheable forever
            from ..release import SliceHandle

            immutable = isinstance(backend, (SnapshotView, SliceHandle))
            ttl = TTL_INF if immutable else self.DEFAULT_MASTER_TTL
        elif ttl == "inf":
            ttl = TTL_INF
        self.ttl = float(ttl)
        self.origin_id = origin_id or f"origin-{id(self):x}"
        self.sim_rtt_s = sim_rtt_s
        self.flap = flap
        self._server = _OriginHTTPServer((host, port), _Handler)
        self._server.origin = self  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None
        self._counters: dict[str, int] = {}
        self._counter_lock = threading.Lock()
        self._body_cache: dict[tuple[str, int], bytes] = {}

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def body_for(self, url: str, q) -> bytes:
        stamp = getattr(self.backend, "state_stamp", -1)
        key = (url, stamp)
        body = self._body_cache.get(key)
        if body is None:
            body = self.backend.read_query_bytes(q)
            if len(self._body_cache) >= 8192:
                self._body_cache.clear()
            self._body_cache[key] = body
        return body

    def count(self, name: str) -> None:
        with self._counter_lock:
            self._counters[name] = self._counters.get(name, 0) + 1

    @property
    def query_count(self) -> int:
        """Requests that reached the query endpoint (200, 304, and errors)."""
        return self._counters.get("queries", 0)

    def counters(self) -> dict[str, int]:
        with self._counter_lock:
            return dict(self._counters)

    def stats_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in sorted(self.counters().items()))

    def start(self) -> "OriginServer":
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="iov-origin", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
