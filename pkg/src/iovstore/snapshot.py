"""Portable single-file snapshot format and its read-only view.

File layout (magic "IOVSNAP1", version 1, little-endian):

    magic[8] | u32 version | u32 section_count
    section table: per section  name[8] (NUL padded) | u64 offset | u64 length
    section bytes (contiguous, in table order)
    trailer: sha256 of every preceding byte (32 raw bytes)

Sections, in fixed order:
    META     canonical JSON: store id, state stamp, normalized selection
    FOLDERS  canonical JSON: partitions and selected folders
    TAGS     canonical JSON: all hierarchical tag nodes
    SEQS     canonical JSON: selected sequences with their records
    OBJECTS  binary: u32 count, then per object (sorted by digest)
             digest[32] | u64 uncompressed size | u32 crc32 | u64 stored len
             | stored bytes (zlib/deflate, as at rest in the store)
    EXTREFS  canonical JSON: logical name -> digest/size reference table

Canonical JSON means sort_keys + compact separators, so identical inputs
produce identical snapshot bytes. A snapshot is self-contained for its
selection: every INLINE payload referenced by an included sequence is in
OBJECTS. The view is read-only and gates queries to the recorded selection.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Callable, Iterable, Mapping, Optional
from urllib.parse import quote, unquote

from .core import (
    OPEN,
    Folder,
    IOVInterval,
    IOVRecord,
    IOVSequence,
    PayloadKind,
    PayloadRef,
    TagTreeNode,
)
from .errors import CorruptSlice, CorruptionError, NoValidRecord, UnsupportedVersion
from .query import CanonicalQuery, query_bounds
from .views import ConditionsRead

SNAPSHOT_MAGIC = b"IOVSNAP1"
SNAPSHOT_VERSION = 1

_SECTION_NAMES = ("META", "FOLDERS", "TAGS", "SEQS", "OBJECTS", "EXTREFS")
_HEADER = struct.Struct("<8sII")
_TABLE_ENTRY = struct.Struct("<8sQQ")
_OBJ_FIXED = struct.Struct("<32sQIQ")

ALL_FOLDERS = "ALL"


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


@dataclass(frozen=True)
class SliceSelection:
    """What goes into a snapshot or release slice.

    folders None means ALL folders under start_node. The iov_range keeps
    whole records that intersect it; the read view refuses queries outside
    the range.
    """

    folders: Optional[tuple[str, ...]]
    start_node: str
    tag: str
    iov_range: IOVInterval
    include_external: bool = True

    def __post_init__(self):
        if self.folders is not None:
            folders = tuple(sorted(set(self.folders)))
            if not folders:
                raise ValueError("folder list must be non-empty (or None for ALL)")
            object.__setattr__(self, "folders", folders)

    @classmethod
    def everything(cls, start_node: str = "", tag: str = "", include_external: bool = True):
        return cls(None, start_node, tag, IOVInterval(0, OPEN), include_external)

    def canonical(self) -> str:
        enc = lambda s: quote(s, safe="")
        folders = (
            ALL_FOLDERS
            if self.folders is None
            else ",".join(enc(f) for f in self.folders)
        )
        return (
            f"folders={folders};start={enc(self.start_node)};tag={enc(self.tag)};"
            f"range={self.iov_range.since:x}:{self.iov_range.until:x};"
            f"external={int(self.include_external)}"
        )

    def to_json(self) -> dict:
        return {
            "folders": None if self.folders is None else list(self.folders),
            "start_node": self.start_node,
            "tag": self.tag,
            "since": self.iov_range.since,
            "until": self.iov_range.until,
            "include_external": self.include_external,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SliceSelection":
        return cls(
            folders=None if d["folders"] is None else tuple(d["folders"]),
            start_node=d["start_node"],
            tag=d["tag"],
            iov_range=IOVInterval(d["since"], d["until"]),
            include_external=bool(d["include_external"]),
        )

    @classmethod
    def from_canonical(cls, text: str) -> "SliceSelection":
        fields = dict(item.split("=", 1) for item in text.split(";"))
        raw_folders = fields["folders"]
        folders = (
            None
            if raw_folders == ALL_FOLDERS
            else tuple(unquote(f) for f in raw_folders.split(","))
        )
        since_hex, until_hex = fields["range"].split(":")
        return cls(
            folders=folders,
            start_node=unquote(fields["start"]),
            tag=unquote(fields["tag"]),
            iov_range=IOVInterval(int(since_hex, 16), int(until_hex, 16)),
            include_external=fields["external"] == "1",
        )


@dataclass(frozen=True)
class ObjectEntry:
    """One stored payload object as it appears in the OBJECTS section."""

    digest: str
    usize: int
    crc32: int
    stored_len: int


@dataclass
class SnapshotInfo:
    """What the writer knows about the file it just produced."""

    path: Optional[Path]
    size: int
    file_sha256: str
    trailer_sha256: str
    n_folders: int
    n_sequences: int
    n_records: int
    objects: list[ObjectEntry]
    externals: dict[str, dict]


def _payload_to_row(p: PayloadRef) -> list:
    return [p.kind.value, p.digest, p.size, p.schema_id, p.logical_name or ""]


def _payload_from_row(row: list) -> PayloadRef:
    kind, digest, size, schema_id, logical = row
    return PayloadRef(
        kind=PayloadKind(kind),
        digest=digest,
        size=size,
        schema_id=schema_id,
        logical_name=logical or None,
    )


def write_snapshot(
    out: BinaryIO,
    *,
    store_id: str,
    state_stamp: int,
    selection: SliceSelection,
    partitions: Iterable[dict],
    folders: Iterable[Folder],
    folder_partitions: Mapping[str, str],
    tag_nodes: Iterable[TagTreeNode],
    sequences: Iterable[IOVSequence],
    object_index: Mapping[str, tuple[int, int, int]],
    object_reader: Callable[[str], bytes],
    externals: Mapping[str, dict],
) -> SnapshotInfo:
    """Stream a snapshot to `out`; deterministic for identical inputs.

    object_index maps digest -> (usize, crc32, stored_len); object_reader
    returns the stored (compressed) bytes for a digest.
    """
    folders = sorted(folders, key=lambda f: f.path)
    seq_list = sorted(sequences, key=lambda s: (s.folder, s.channel, s.leaf_tag))

    meta = {
        "format": SNAPSHOT_VERSION,
        "kind": "conditions-snapshot",
        "selection": selection.to_json(),
        "state_stamp": state_stamp,
        "store_id": store_id,
    }
    folders_doc = {
        "folders": [
            {
                "channels": list(f.channels),
                "partition": folder_partitions.get(f.path, ""),
                "path": f.path,
                "schema_id": f.schema_id,
            }
            for f in folders
        ],
        "partitions": sorted(partitions, key=lambda p: p["name"]),
    }
    tags_doc = {
        "nodes": [
            {"associations": dict(n.associations), "name": n.name, "owner": n.owner}
            for n in sorted(tag_nodes, key=lambda n: (n.owner, n.name))
        ]
    }
    seqs_doc = {
        "sequences": [
            {
                "channel": s.channel,
                "folder": s.folder,
                "leaf_tag": s.leaf_tag,
                "records": [
                    [r.interval.since, r.interval.until, r.insertion_index]
                    + _payload_to_row(r.payload)
                    for r in s.records
                ],
            }
            for s in seq_list
        ]
    }
    ext_doc = {"files": {k: dict(v) for k, v in sorted(externals.items())}}

    # inline digests referenced by the included sequences, deduplicated
    digests = sorted(
        {
            r.payload.digest
            for s in seq_list
            for r in s.records
            if r.payload.kind is PayloadKind.INLINE
        }
    )
    object_entries = []
    objects_len = 4
    for d in digests:
        usize, crc, stored_len = object_index[d]
        object_entries.append(ObjectEntry(d, usize, crc, stored_len))
        objects_len += _OBJ_FIXED.size + stored_len

    section_bytes = {
        "META": canonical_json(meta),
        "FOLDERS": canonical_json(folders_doc),
        "TAGS": canonical_json(tags_doc),
        "SEQS": canonical_json(seqs_doc),
        "EXTREFS": canonical_json(ext_doc),
    }
    section_lens = {name: len(section_bytes[name]) for name in section_bytes}
    section_lens["OBJECTS"] = objects_len

    header_len = _HEADER.size + len(_SECTION_NAMES) * _TABLE_ENTRY.size
    offset = header_len
    table = bytearray()
    for name in _SECTION_NAMES:
        table += _TABLE_ENTRY.pack(name.encode().ljust(8, b"\0"), offset, section_lens[name])
        offset += section_lens[name]

    file_sha = hashlib.sha256()
    trailer_sha = hashlib.sha256()
    written = 0

    def emit(data: bytes):
        nonlocal written
        out.write(data)
        file_sha.update(data)
        trailer_sha.update(data)
        written += len(data)

    emit(_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, len(_SECTION_NAMES)))
    emit(bytes(table))
    for name in _SECTION_NAMES:
        if name == "OBJECTS":
            emit(struct.pack("<I", len(object_entries)))
            for entry in object_entries:
                stored = object_reader(entry.digest)
                if len(stored) != entry.stored_len:
                    raise CorruptionError(
                        f"stored object length changed under us: {entry.digest}"
                    )
                emit(
                    _OBJ_FIXED.pack(
                        bytes.fromhex(entry.digest), entry.usize, entry.crc32, entry.stored_len
                    )
                )
                emit(stored)
        else:
            emit(section_bytes[name])

    trailer = trailer_sha.digest()
    out.write(trailer)
    file_sha.update(trailer)
    written += len(trailer)

    n_records = sum(len(s.records) for s in seq_list)
    return SnapshotInfo(
        path=None,
        size=written,
        file_sha256=file_sha.hexdigest(),
        trailer_sha256=trailer.hex(),
        n_folders=len(folders),
        n_sequences=len(seq_list),
        n_records=n_records,
        objects=object_entries,
        externals=dict(ext_doc["files"]),
    )


class SnapshotView(ConditionsRead):
    """Read-only view over snapshot bytes; safe to share across threads.

    Construction verifies the trailer digest (pass verify=False to defer to
    per-object checks only). Payload reads always verify stored length,
    CRC-32, and content digest before returning bytes.
    """

    def __init__(self, data: bytes, *, verify: bool = True, payload_cache: int = 2048):
        if len(data) < _HEADER.size + 32:
            raise CorruptSlice("snapshot too short")
        magic, version, n_sections = _HEADER.unpack_from(data, 0)
        if magic != SNAPSHOT_MAGIC:
            raise CorruptSlice("bad snapshot magic")
        if version != SNAPSHOT_VERSION:
            raise UnsupportedVersion(f"snapshot version {version} not supported")
        if verify:
            if hashlib.sha256(data[:-32]).digest() != data[-32:]:
                raise CorruptSlice("snapshot trailer digest mismatch")
        self._data = data
        sections = {}
        pos = _HEADER.size
        for _ in range(n_sections):
            raw_name, offset, length = _TABLE_ENTRY.unpack_from(data, pos)
            pos += _TABLE_ENTRY.size
            if offset + length > len(data) - 32:
                raise CorruptSlice("section table points past trailer")
            sections[raw_name.rstrip(b"\0").decode()] = (offset, length)
        try:
            self._meta = self._json_section(sections, "META")
            folders_doc = self._json_section(sections, "FOLDERS")
            tags_doc = self._json_section(sections, "TAGS")
            seqs_doc = self._json_section(sections, "SEQS")
            ext_doc = self._json_section(sections, "EXTREFS")
        except (json.JSONDecodeError, KeyError, UnicodeDecodeError) as e:
            raise CorruptSlice(f"undecodable snapshot section: {e}") from e

        self.selection = SliceSelection.from_json(self._meta["selection"])
        self.store_id: str = self._meta["store_id"]
        self.state_stamp: int = self._meta["state_stamp"]
        self.partitions = {p["name"]: p for p in folders_doc["partitions"]}
        self._folders = {
            f["path"]: Folder(f["path"], f["schema_id"], tuple(f["channels"]))
            for f in folders_doc["folders"]
        }
        self._folder_partitions = {
            f["path"]: f["partition"] for f in folders_doc["folders"]
        }
        self._tag_nodes = {
            (n["owner"], n["name"]): TagTreeNode(n["owner"], n["name"], n["associations"])
            for n in tags_doc["nodes"]
        }
        self._sequences = {}
        for s in seqs_doc["sequences"]:
            records = tuple(
                IOVRecord(
                    interval=IOVInterval(row[0], row[1]),
                    insertion_index=row[2],
                    payload=_payload_from_row(row[3:]),
                )
                for row in s["records"]
            )
            seq = IOVSequence(s["folder"], s["channel"], s["leaf_tag"], records)
            self._sequences[(s["folder"], s["channel"], s["leaf_tag"])] = seq
        self.externals: dict[str, dict] = ext_doc["files"]

        obj_off, obj_len = sections["OBJECTS"]
        (count,) = struct.unpack_from("<I", data, obj_off)
        pos = obj_off + 4
        self._objects: dict[str, tuple[int, int, int, int]] = {}
        for _ in range(count):
            raw_digest, usize, crc, stored_len = _OBJ_FIXED.unpack_from(data, pos)
            pos += _OBJ_FIXED.size
            self._objects[raw_digest.hex()] = (pos, stored_len, usize, crc)
            pos += stored_len
        if pos != obj_off + obj_len:
            raise CorruptSlice("OBJECTS section length mismatch")

        self._cache: dict[str, bytes] = {}
        self._cache_cap = payload_cache
        self._cache_lock = threading.Lock()

    @classmethod
    def open(cls, path: str | Path, *, verify: bool = True) -> "SnapshotView":
        return cls(Path(path).read_bytes(), verify=verify)

    def _json_section(self, sections, name: str):
        offset, length = sections[name]
        return json.loads(self._data[offset : offset + length].decode())

    # -- ConditionsRead primitives --------------------------------------------

    def folder_info(self, path: str) -> Optional[Folder]:
        return self._folders.get(path)

    def folder_paths(self) -> list[str]:
        return sorted(self._folders)

    def tag_nodes(self):
        return self._tag_nodes

    def sequence(self, folder: str, channel: int, leaf_tag: str) -> Optional[IOVSequence]:
        return self._sequences.get((folder, channel, leaf_tag))

    def sequences(self) -> list[IOVSequence]:
        return [self._sequences[k] for k in sorted(self._sequences)]

    def query_guard(self, q: CanonicalQuery) -> None:
        lo, hi = query_bounds(q)
        sel = self.selection.iov_range
        if lo < sel.since or hi > sel.until:
            raise NoValidRecord(
                f"query window [{lo}, {hi}) outside snapshot selection "
                f"[{sel.since}, {sel.until})"
            )

    def object_entries(self) -> list[ObjectEntry]:
        return [
            ObjectEntry(d, usize, crc, stored_len)
            for d, (_, stored_len, usize, crc) in sorted(self._objects.items())
        ]

    def payload_bytes(self, ref: PayloadRef) -> bytes:
        cached = self._cache.get(ref.digest)
        if cached is not None:
            return cached
        entry = self._objects.get(ref.digest)
        if entry is None:
            raise CorruptSlice(f"snapshot missing inline object {ref.digest}")
        offset, stored_len, usize, crc = entry
        try:
            raw = zlib.decompress(self._data[offset : offset + stored_len])
        except zlib.error as e:
            raise CorruptSlice(f"object {ref.digest} fails to decompress: {e}") from e
        if len(raw) != usize:
            raise CorruptSlice(f"object {ref.digest} has wrong uncompressed size")
        if zlib.crc32(raw) & 0xFFFFFFFF != crc:
            raise CorruptSlice(f"object {ref.digest} fails its buffer checksum")
        if hashlib.sha256(raw).hexdigest() != ref.digest:
            raise CorruptSlice(f"object {ref.digest} fails its content digest")
        with self._cache_lock:
            if len(self._cache) >= self._cache_cap:
                self._cache.clear()
            self._cache[ref.digest] = raw
        return raw
