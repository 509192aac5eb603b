"""Exception hierarchy for the whole package.

Every error class maps to exactly one CLI exit code (see cli.EXIT_CODES):
usage/malformed input, policy violations, IO, corruption, resolution
failures, and backend/network failures are distinct classes so callers can
tell logic errors from environmental ones.
"""


class IovStoreError(Exception):
    """Base class for all errors raised by this package."""


# -- validation / usage -------------------------------------------------------

class InvalidInterval(IovStoreError):
    """Interval with since >= until (empty or inverted)."""


class MalformedQuery(IovStoreError):
    """Query or canonical URL that does not validate."""


class ConfigError(IovStoreError):
    """Bad CLI/scenario configuration (unknown keys, bad values)."""


# -- policy -------------------------------------------------------------------

class PolicyViolation(IovStoreError):
    """Request forbidden by the NO DELETE / NO UPDATE store policies."""


class ExtendOnlyViolation(PolicyViolation):
    """Commit that would insert before or at the current head of a sequence."""


# -- resolution ---------------------------------------------------------------

class ResolutionError(IovStoreError):
    """Base for lookup failures (unknown names, no matching record)."""


class UnknownPartition(ResolutionError):
    pass


class UnknownFolder(ResolutionError):
    pass


class UnknownChannel(ResolutionError):
    pass


class UnknownTag(ResolutionError):
    pass


class MissingAssociation(ResolutionError):
    """Tag-tree node on the resolution path lacks an association for the next component."""


class NoValidRecord(ResolutionError):
    """No record is valid at the queried point, or the query falls outside a slice's selection."""


class UnknownLogicalName(ResolutionError):
    pass


class AlreadyExists(ResolutionError):
    pass


# -- storage / IO -------------------------------------------------------------

class StorageError(IovStoreError):
    """IO-level failure, distinct from logic errors."""


class MissingExternalFile(StorageError):
    """An EXTERNAL payload reference has no resolvable source file."""


# -- corruption / integrity ---------------------------------------------------

class CorruptionError(IovStoreError):
    """Base for detected data corruption."""


class CorruptSlice(CorruptionError):
    pass


class CorruptMember(CorruptionError):
    pass


class CorruptCacheEntry(CorruptionError):
    pass


class UnsupportedVersion(CorruptionError):
    """File or wire format version this build does not understand."""


class AlgorithmMismatch(IovStoreError):
    """Digests computed with different algorithms cannot be compared."""


# -- network / backends -------------------------------------------------------

class UpstreamUnavailable(IovStoreError):
    """The proxy could not reach its upstream."""


class AllBackendsFailed(IovStoreError):
    """Every endpoint in the failover list failed; carries per-backend causes."""

    def __init__(self, causes):
        self.causes = list(causes)
        detail = "; ".join(f"[{i}] {c}" for i, c in enumerate(self.causes))
        super().__init__(f"all backends failed: {detail}")


# -- harness ------------------------------------------------------------------

class UnreachableByteTarget(IovStoreError):
    """Generated workload cannot meet the profile's byte target from this store."""


class InsufficientData(IovStoreError):
    """Too few bins/samples for the requested statistic."""
