"""Versioned interval-of-validity conditions store with distribution tiers.

Subsystems:
- core: pure IOV/tag data model
- store: durable master store and commit pipeline
- snapshot / release: portable snapshots and self-contained slice archives
- cachetier: HTTP origin, read-through caching proxy, failover client
- integrity: checksums, digests, verify workflows, corruption injection
- harness: synthetic stores, workload traces, replay metrics, scenarios
- cli: the `iovstore` command
"""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    OPEN,
    Folder,
    FoldersetTree,
    IOVInterval,
    IOVRecord,
    IOVSequence,
    PayloadKind,
    PayloadRef,
    TagTreeNode,
    effective_payload,
    insert_iov,
    make_interval,
    resolve_iov,
    resolve_tag,
)
from .query import CanonicalQuery, ResultSet, canonical_url  # noqa: F401
from .snapshot import SliceSelection, SnapshotView  # noqa: F401
from .store import CommitRequest, Store  # noqa: F401
