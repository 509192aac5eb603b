"""Shared wire conventions for the HTTP read path.

The whole query is in the URL (GET only), so any standard HTTP cache could
front the origin as well. The body is the versioned binary result-set
encoding; the ETag carries its sha256 so every tier can validate what it is
about to serve, and revalidation is an If-None-Match exchange that needs no
clock agreement between tiers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

CONTENT_TYPE = "application/x-iov-resultset"
TTL_HEADER = "X-IOV-TTL"
ORIGIN_HEADER = "X-IOV-Origin"
CACHE_STATUS_HEADER = "X-Cache"

TTL_INF = math.inf


def format_ttl(ttl: Union[float, int]) -> str:
    return "inf" if ttl == TTL_INF else f"{ttl:g}"


def parse_ttl(raw: Optional[str], default: float = 300.0) -> float:
    if raw is None:
        return default
    if raw == "inf":
        return TTL_INF
    try:
        value = float(raw)
    except ValueError:
        return default
    return value if value >= 0 else default


def quote_etag(validator: str) -> str:
    return f'"{validator}"'


def unquote_etag(raw: Optional[str]) -> Optional[str]:
    if raw is None:
        return None
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == '"' and raw[-1] == '"':
        return raw[1:-1]
    return raw or None


@dataclass(frozen=True)
class WireResponse:
    """One response as it travels between tiers."""

    status: int
    body: bytes
    validator: str  # sha256 hex of body
    ttl: float  # seconds, TTL_INF for immutable backends
    origin_id: str
