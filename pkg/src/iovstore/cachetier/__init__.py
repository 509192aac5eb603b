"""Frontier-style scalable read path.

An origin HTTP server translates canonical query URLs into reads against a
store, snapshot, or slice; a read-through caching proxy sits in front keyed
on those URLs; and a failover client walks an ordered endpoint list so
application code never cares which backend answered. Responses are the
deterministic binary result-set encoding, validated end to end by a strong
digest carried in the ETag.
"""

from .wire import (  # noqa: F401
    CACHE_STATUS_HEADER,
    ORIGIN_HEADER,
    TTL_HEADER,
    WireResponse,
    format_ttl,
    parse_ttl,
)
from .origin import FlapController, OriginServer  # noqa: F401
from .proxy import CacheEntry, CachingProxy, ProxyServer  # noqa: F401
from .client import (  # noqa: F401
    ConditionsClient,
    Endpoint,
    ReadResult,
    client_read,
    parse_endpoint,
)
