"""Pure data model for intervals of validity, folders, tags, and payload refs.

No storage and no network here: every type is an immutable value validated at
construction, so instances can be shared across threads freely.

Model summary:
- The condition-time axis is a single unsigned 64-bit ordinal. The maximum
  representable value is reserved as the OPEN sentinel ("valid until further
  notice") and is never a legal query point.
- Intervals are half-open: [since, until), so a point t belongs to exactly one
  record of a valid sequence.
- An IOVSequence is the ordered, pairwise-disjoint record list for one
  (folder, channel, leaf tag). Only the trailing record may be OPEN-ended, and
  the only mutation the model supports is extend-at-the-end (insert_iov),
  which returns a new sequence value.
- Folders live in a slash-separated folderset tree; the root folderset is the
  empty path "". Hierarchical tags are nodes owned by folderset paths whose
  associations name, per immediate child, the tag to follow at that child.
  Resolution walks from any starting node down to a folder and yields the
  leaf tag name to read.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Protocol

from .errors import (
    InvalidInterval,
    ExtendOnlyViolation,
    MissingAssociation,
    NoValidRecord,
    UnknownTag,
)

# Maximum u64 is the OPEN sentinel; never a valid query point or `since`.
OPEN = 0xFFFF_FFFF_FFFF_FFFF

MAX_CHANNEL = 0xFFFF_FFFF

DIGEST_ALGORITHM = "sha256"
DIGEST_HEX_LEN = 64

_HEX_DIGITS = set("0123456789abcdef")


def validate_point(value: int, *, what: str = "validity point") -> int:
    """Check that `value` is a usable point on the time axis (not OPEN)."""
    if not isinstance(value, int) or isinstance(value, bool):
        raise InvalidInterval(f"{what} must be an integer, got {value!r}")
    if not 0 <= value < OPEN:
        raise InvalidInterval(f"{what} out of range: {value}")
    return value


def validate_until(value: int) -> int:
    """Like validate_point but allows the OPEN sentinel."""
    if not isinstance(value, int) or isinstance(value, bool):
        raise InvalidInterval(f"until must be an integer, got {value!r}")
    if not 0 <= value <= OPEN:
        raise InvalidInterval(f"until out of range: {value}")
    return value


def path_components(path: str) -> list[str]:
    """Split a folder/folderset path; the root folderset is ''."""
    if path == "":
        return []
    parts = path.split("/")
    for part in parts:
        if not part or part in (".", ".."):
            raise ValueError(f"invalid path component in {path!r}")
    return parts


def is_descendant(path: str, ancestor: str) -> bool:
    """True if `path` lies strictly below `ancestor` ('' is everyone's ancestor)."""
    if ancestor == "":
        return path != ""
    return path.startswith(ancestor + "/")


@dataclass(frozen=True)
class IOVInterval:
    """Half-open validity interval [since, until); until may be OPEN."""

    since: int
    until: int

    def __post_init__(self):
        validate_point(self.since, what="since")
        validate_until(self.until)
        if self.since >= self.until:
            raise InvalidInterval(f"empty interval: since={self.since} until={self.until}")

    def contains(self, t: int) -> bool:
        return self.since <= t < self.until

    def intersects(self, other: "IOVInterval") -> bool:
        return self.since < other.until and other.since < self.until

    @property
    def open_ended(self) -> bool:
        return self.until == OPEN


def make_interval(since: int, until: int = OPEN) -> IOVInterval:
    """Validated interval constructor; raises InvalidInterval when since >= until."""
    return IOVInterval(since, until)


class PayloadKind(str, Enum):
    INLINE = "inline"
    EXTERNAL = "external"


@dataclass(frozen=True)
class PayloadRef:
    """Content-addressed reference to an opaque payload.

    INLINE refs point at objects stored in the conditions store itself;
    EXTERNAL refs name a file resolved through a file catalog. The digest is
    always over the *uncompressed* payload bytes.
    """

    kind: PayloadKind
    digest: str
    size: int
    schema_id: str
    logical_name: Optional[str] = None

    def __post_init__(self):
        if len(self.digest) != DIGEST_HEX_LEN or not set(self.digest) <= _HEX_DIGITS:
            raise ValueError(
                f"digest must be {DIGEST_HEX_LEN} lowercase hex chars, got {self.digest!r}"
            )
        if self.size < 0:
            raise ValueError("payload size must be >= 0")
        if not self.schema_id:
            raise ValueError("schema_id must be non-empty")
        if self.kind is PayloadKind.EXTERNAL:
            if not self.logical_name:
                raise ValueError("EXTERNAL payload refs require a logical_name")
        elif self.logical_name is not None:
            raise ValueError("INLINE payload refs carry no logical_name")


@dataclass(frozen=True)
class IOVRecord:
    interval: IOVInterval
    payload: PayloadRef
    insertion_index: int

    def __post_init__(self):
        if self.insertion_index < 0:
            raise ValueError("insertion_index must be >= 0")


@dataclass(frozen=True)
class IOVSequence:
    """Ordered, disjoint record list for one (folder, channel, leaf tag).

    Records are sorted by interval.since with pairwise-disjoint intervals; at
    most the last record is OPEN-ended. Instances are immutable; insert_iov
    returns a new sequence.
    """

    folder: str
    channel: int
    leaf_tag: str
    records: tuple[IOVRecord, ...] = ()
    # since values cached for binary search; derived, not part of identity
    _sinces: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        path_components(self.folder)
        if self.folder == "":
            raise ValueError("folder path must be non-empty")
        if not 0 <= self.channel <= MAX_CHANNEL:
            raise ValueError(f"channel out of range: {self.channel}")
        if not self.leaf_tag:
            raise ValueError("leaf_tag must be non-empty")
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        # disjointness also forces any OPEN-ended record to be last: an OPEN
        # until would overlap whatever followed it
        prev: IOVRecord | None = None
        for rec in records:
            if prev is not None:
                if rec.interval.since <= prev.interval.since:
                    raise ValueError("records must be strictly increasing in since")
                if prev.interval.until > rec.interval.since:
                    raise ValueError("record intervals must be pairwise disjoint")
            prev = rec
        object.__setattr__(self, "_sinces", tuple(r.interval.since for r in records))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last(self) -> Optional[IOVRecord]:
        return self.records[-1] if self.records else None


def resolve_iov(seq: IOVSequence, t: int) -> Optional[IOVRecord]:
    """Return the unique record whose interval contains t, or None.

    Binary search on the cached since values; absence is a valid result.
    """
    validate_point(t, what="query point")
    idx = bisect.bisect_right(seq._sinces, t) - 1
    if idx < 0:
        return None
    rec = seq.records[idx]
    return rec if rec.interval.contains(t) else None


def insert_iov(seq: IOVSequence, since: int, payload: PayloadRef) -> IOVSequence:
    """Extend a sequence with a new open-ended record starting at `since`.

    If the current last record is OPEN-ended it is truncated to until=since;
    closed records are never touched. Raises ExtendOnlyViolation when `since`
    does not lie strictly after the last record's since.
    """
    validate_point(since, what="since")
    records = list(seq.records)
    if records:
        last = records[-1]
        if since <= last.interval.since:
            raise ExtendOnlyViolation(
                f"only the current IOV sequence can be extended: "
                f"since={since} <= head since={last.interval.since} "
                f"({seq.folder} ch={seq.channel} tag={seq.leaf_tag})"
            )
        if last.interval.open_ended:
            records[-1] = IOVRecord(
                interval=IOVInterval(last.interval.since, since),
                payload=last.payload,
                insertion_index=last.insertion_index,
            )
        elif last.interval.until > since:
            # closed head reaching past the new since would overlap; model
            # only ever produces closed heads via truncation, so this is
            # caller error
            raise ExtendOnlyViolation(
                f"new record at {since} would overlap closed head ending at "
                f"{last.interval.until}"
            )
    next_index = records[-1].insertion_index + 1 if records else 0
    records.append(
        IOVRecord(interval=IOVInterval(since, OPEN), payload=payload, insertion_index=next_index)
    )
    return IOVSequence(seq.folder, seq.channel, seq.leaf_tag, tuple(records))


@dataclass(frozen=True)
class Folder:
    """Leaf of the folderset tree: a payload schema plus declared channels."""

    path: str
    schema_id: str
    channels: tuple[int, ...]

    def __post_init__(self):
        if not path_components(self.path):
            raise ValueError("folder path must be non-empty")
        if not self.schema_id:
            raise ValueError("schema_id must be non-empty")
        channels = tuple(sorted(set(self.channels)))
        for ch in channels:
            if not 0 <= ch <= MAX_CHANNEL:
                raise ValueError(f"channel out of range: {ch}")
        if not channels:
            raise ValueError("folder must declare at least one channel")
        object.__setattr__(self, "channels", channels)


class FoldersetTree:
    """Folder registry organized as a tree of slash-separated paths.

    Folderset nodes are implicit (every proper prefix of a folder path); a
    path cannot be both a folder and a folderset. schema_id is immutable
    after creation.
    """

    def __init__(self, folders: Iterable[Folder] = ()):
        self._folders: dict[str, Folder] = {}
        self._children: dict[str, set[str]] = {"": set()}
        for f in folders:
            self.add(f)

    def add(self, folder: Folder) -> None:
        if folder.path in self._folders:
            raise ValueError(f"folder already exists: {folder.path}")
        if folder.path in self._children:
            raise ValueError(f"path is a folderset, not a folder: {folder.path}")
        parts = path_components(folder.path)
        # register implicit folderset nodes along the way
        prefix = ""
        for part in parts[:-1]:
            child = f"{prefix}/{part}" if prefix else part
            if child in self._folders:
                raise ValueError(f"path component is a folder: {child}")
            self._children.setdefault(prefix, set()).add(part)
            self._children.setdefault(child, set())
            prefix = child
        self._children.setdefault(prefix, set()).add(parts[-1])
        self._folders[folder.path] = folder

    def folder(self, path: str) -> Optional[Folder]:
        return self._folders.get(path)

    def is_folderset(self, path: str) -> bool:
        return path in self._children

    def children(self, folderset: str) -> list[str]:
        return sorted(self._children.get(folderset, ()))

    def folders(self) -> list[Folder]:
        return [self._folders[p] for p in sorted(self._folders)]

    def paths(self) -> list[str]:
        return sorted(self._folders)

    def __contains__(self, path: str) -> bool:
        return path in self._folders

    def __len__(self) -> int:
        return len(self._folders)


@dataclass(frozen=True)
class TagTreeNode:
    """Hierarchical tag at one folderset node.

    `associations` maps an immediate child name (folderset or folder) to the
    tag name defined at that child: a hierarchical tag for a child folderset,
    a leaf tag for a child folder.
    """

    owner: str
    name: str
    associations: Mapping[str, str]

    def __post_init__(self):
        path_components(self.owner)
        if not self.name:
            raise ValueError("tag name must be non-empty")
        assoc = dict(self.associations)
        for child, target in assoc.items():
            if not child or "/" in child:
                raise ValueError(f"association key must be an immediate child name: {child!r}")
            if not target:
                raise ValueError(f"association target for {child!r} must be non-empty")
        object.__setattr__(self, "associations", assoc)

    def child_path(self, child: str) -> str:
        return f"{self.owner}/{child}" if self.owner else child


def resolve_tag(
    nodes: Iterable[TagTreeNode],
    start_node: str,
    tag: str,
    folder: str,
) -> str:
    """Walk a tag tree from `start_node` down to `folder`; return the leaf tag.

    Deterministic and independent of association-map iteration order: each
    step follows exactly the association named by the next path component.
    """
    by_key = nodes if isinstance(nodes, dict) else {(n.owner, n.name): n for n in nodes}
    if not is_descendant(folder, start_node):
        raise UnknownTag(
            f"folder {folder!r} is not a descendant of starting node {start_node!r}"
        )
    rel = folder[len(start_node) + 1 :] if start_node else folder
    current_node = start_node
    current_tag = tag
    for component in rel.split("/"):
        node = by_key.get((current_node, current_tag))
        if node is None:
            raise UnknownTag(f"no tag {current_tag!r} defined at node {current_node!r}")
        target = node.associations.get(component)
        if target is None:
            raise MissingAssociation(
                f"tag {current_tag!r} at {current_node!r} has no association "
                f"for child {component!r}"
            )
        current_tag = target
        current_node = f"{current_node}/{component}" if current_node else component
    return current_tag


class SequenceView(Protocol):
    """Minimal read surface effective_payload needs from any backend."""

    def tag_nodes(self) -> Mapping[tuple[str, str], TagTreeNode]: ...

    def sequence(self, folder: str, channel: int, leaf_tag: str) -> Optional[IOVSequence]: ...


def resolve_leaf_tag(view: SequenceView, start_node: str, tag: str, folder: str) -> str:
    """Resolve (start_node, tag) to a leaf tag; start_node == folder names it directly."""
    if start_node == folder:
        return tag
    return resolve_tag(view.tag_nodes(), start_node, tag, folder)


def effective_payload(
    view: SequenceView,
    folder: str,
    channel: int,
    start_node: str,
    tag: str,
    t: int,
) -> PayloadRef:
    """Tag resolution composed with IOV lookup: the payload in effect at t."""
    leaf = resolve_leaf_tag(view, start_node, tag, folder)
    seq = view.sequence(folder, channel, leaf)
    rec = resolve_iov(seq, t) if seq is not None else None
    if rec is None:
        raise NoValidRecord(
            f"no record valid at t={t} for {folder} ch={channel} tag={leaf}"
        )
    return rec.payload
