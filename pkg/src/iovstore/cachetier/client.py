"""Failover client: ordered backends, first success wins, identical bytes.

Endpoints are "kind:target" strings:

    proxy:http://host:port     caching proxy (HTTP)
    origin:http://host:port    origin server (HTTP)
    slice:/path/to/archive     local release slice

Given consistent data, the returned bytes are the same whichever backend
answers; the client verifies every HTTP body against its ETag validator and
re-encodes slice results through the same deterministic encoding. Which
backend served (and the proxy's cache status) is recorded on the result for
tests and metrics. Thread-safe: HTTP connections are per-thread, slice
handles are shared and immutable.
"""

from __future__ import annotations

import hashlib
import http.client
import threading
from dataclasses import dataclass
from typing import Optional, Sequence, Union
from urllib.parse import urlparse

from ..errors import AllBackendsFailed, IovStoreError
from ..query import CanonicalQuery, ResultSet, canonical_url, decode_result_set
from .wire import CACHE_STATUS_HEADER, unquote_etag

ENDPOINT_KINDS = ("proxy", "origin", "slice")


@dataclass(frozen=True)
class Endpoint:
    kind: str
    target: str

    def __post_init__(self):
        if self.kind not in ENDPOINT_KINDS:
            raise ValueError(f"unknown endpoint kind: {self.kind!r}")
        if self.kind in ("proxy", "origin"):
            parsed = urlparse(self.target)
            if parsed.scheme != "http" or not parsed.hostname:
                raise ValueError(f"{self.kind} endpoint needs an http:// URL: {self.target!r}")

    def __str__(self) -> str:
        return f"{self.kind}:{self.target}"


def parse_endpoint(spec: str) -> Endpoint:
    kind, sep, target = spec.partition(":")
    if not sep or not target:
        raise ValueError(f"endpoint must be kind:target, got {spec!r}")
    return Endpoint(kind, target)


@dataclass(frozen=True)
class ReadResult:
    result_set: ResultSet
    body: bytes
    validator: str
    backend_index: int
    backend_kind: str
    cache_status: str  # HIT/MISS/REVALIDATED from a proxy, ORIGIN or SLICE otherwise


class ConditionsClient:
    """Reads through an ordered endpoint list; raises AllBackendsFailed last."""

    def __init__(self, endpoints: Sequence[Union[Endpoint, str]], *, timeout: float = 30.0):
        if not endpoints:
            raise ValueError("endpoint list must be non-empty")
        self.endpoints = [
            e if isinstance(e, Endpoint) else parse_endpoint(e) for e in endpoints
        ]
        self.timeout = timeout
        self._tls = threading.local()
        self._slice_handles: dict[int, object] = {}
        self._slice_lock = threading.Lock()

    # -- per-backend plumbing ---------------------------------------------------

    def _conn_for(self, index: int, endpoint: Endpoint) -> http.client.HTTPConnection:
        conns = getattr(self._tls, "conns", None)
        if conns is None:
            conns = {}
            self._tls.conns = conns
        conn = conns.get(index)
        if conn is None:
            parsed = urlparse(endpoint.target)
            conn = http.client.HTTPConnection(
                parsed.hostname, parsed.port or 80, timeout=self.timeout
            )
            conns[index] = conn
        return conn

    def _drop_conn(self, index: int) -> None:
        conns = getattr(self._tls, "conns", None)
        if conns and index in conns:
            conns[index].close()
            del conns[index]

    def _slice_handle(self, index: int, endpoint: Endpoint):
        handle = self._slice_handles.get(index)
        if handle is None:
            with self._slice_lock:
                handle = self._slice_handles.get(index)
                if handle is None:
                    from ..release import open_slice

                    handle = open_slice(endpoint.target)
                    self._slice_handles[index] = handle
        return handle

    def _http_read(self, index: int, endpoint: Endpoint, url: str) -> ReadResult:
        last_exc: Optional[Exception] = None
        for attempt in (0, 1):  # one silent retry for stale keep-alive sockets
            conn = self._conn_for(index, endpoint)
            try:
                conn.request("GET", url)
                resp = conn.getresponse()
                body = resp.read()
            except (OSError, http.client.HTTPException) as e:
                self._drop_conn(index)
                last_exc = e
                continue
            if resp.status != 200:
                if resp.getheader("Connection", "").lower() == "close":
                    self._drop_conn(index)
                raise IovStoreError(
                    f"{endpoint} answered {resp.status}: {body[:200].decode(errors='replace')}"
                )
            validator = unquote_etag(resp.getheader("ETag")) or ""
            if hashlib.sha256(body).hexdigest() != validator:
                raise IovStoreError(f"{endpoint} body does not match its validator")
            cache_status = resp.getheader(CACHE_STATUS_HEADER) or "ORIGIN"
            return ReadResult(
                result_set=decode_result_set(body),
                body=body,
                validator=validator,
                backend_index=index,
                backend_kind=endpoint.kind,
                cache_status=cache_status,
            )
        raise IovStoreError(f"{endpoint} unreachable: {last_exc}")

    def _slice_read(self, index: int, endpoint: Endpoint, q: CanonicalQuery) -> ReadResult:
        handle = self._slice_handle(index, endpoint)
        rs = handle.read_query(q)
        from ..query import encode_result_set

        body = encode_result_set(rs)
        return ReadResult(
            result_set=rs,
            body=body,
            validator=hashlib.sha256(body).hexdigest(),
            backend_index=index,
            backend_kind="slice",
            cache_status="SLICE",
        )

    # -- public API ----------------------------------------------------------------

    def read(self, q: CanonicalQuery) -> ReadResult:
        url = canonical_url(q)
        causes: list[str] = []
        for index, endpoint in enumerate(self.endpoints):
            try:
                if endpoint.kind == "slice":
                    return self._slice_read(index, endpoint, q)
                return self._http_read(index, endpoint, url)
            except Exception as e:
                causes.append(f"{endpoint}: {type(e).__name__}: {e}")
        raise AllBackendsFailed(causes)

    def close(self) -> None:
        conns = getattr(self._tls, "conns", None)
        if conns:
            for conn in conns.values():
                conn.close()
            conns.clear()
        with self._slice_lock:
            for handle in self._slice_handles.values():
                close = getattr(handle, "close", None)
                if close:
                    close()
            self._slice_handles.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def client_read(endpoints: Sequence[Union[Endpoint, str]], q: CanonicalQuery) -> ResultSet:
    """One-shot read through a fresh client."""
    with ConditionsClient(endpoints) as client:
        return client.read(q).result_set
