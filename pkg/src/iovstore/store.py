"""The authoritative conditions store.

On-disk layout (format 1, documented and versioned):

    <store>/
      manifest.json    store id, format, partitions {name: {role, root}}
      folders.json     folder registry {path: {partition, schema_id, channels}}
      tags.json        hierarchical tag nodes
      externals.json   logical name -> {digest, size} reference registry
      externals/       registered external files (percent-encoded names)
      objects/aa/bb/<digest>   content-addressed payload objects
      logs/<partition>.log     append-only commit log, one record per line
      index.json       checkpoint of replayed state (optional fast reopen)

Consistency is enforced by policy, not by the layout being mutable: records,
payload objects, folders, and tags are never deleted or updated in place; the
only write is extending a sequence. Object files hold a 16-byte header
(magic, uncompressed size, CRC-32 of the uncompressed bytes) followed by the
zlib-compressed payload; the file name is the sha256 of the uncompressed
bytes. Each log line ends with its own CRC-32, so a torn append is detected
and dropped on reopen. Commits write the payload object before the log line:
a crash between the two leaves an orphan object, never a dangling record.

Writes are serialized through one lock; sequences are immutable values that
are swapped in atomically, so readers and snapshots never observe a partial
commit.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import threading
import uuid
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional
from urllib.parse import quote

from .core import (
    Folder,
    FoldersetTree,
    IOVSequence,
    PayloadKind,
    PayloadRef,
    TagTreeNode,
    insert_iov,
    is_descendant,
    path_components,
    resolve_tag,
)
from .errors import (
    AlreadyExists,
    CorruptionError,
    MissingExternalFile,
    PolicyViolation,
    StorageError,
    UnknownFolder,
    UnknownPartition,
    UnknownTag,
)
from .snapshot import SliceSelection, SnapshotInfo, canonical_json, write_snapshot
from .views import ConditionsRead

STORE_FORMAT = 1
PARTITION_ROLES = ("ONLINE", "OFFLINE", "SIMULATION")

_OBJ_MAGIC = b"OBJ1"
_OBJ_HEADER = struct.Struct("<4sQI")


@dataclass(frozen=True)
class CommitRequest:
    """One write into the commit pipeline: metadata plus exactly one payload form."""

    folder: str
    channel: int
    leaf_tag: str
    since: int
    inline_data: Optional[bytes] = None
    external_logical_name: Optional[str] = None
    external_digest: Optional[str] = None
    external_size: Optional[int] = None
    author: str = ""
    comment: str = ""

    def __post_init__(self):
        inline = self.inline_data is not None
        external = self.external_logical_name is not None
        if inline == external:
            raise ValueError("exactly one of inline_data / external reference required")
        if external and (self.external_digest is None or self.external_size is None):
            raise ValueError("external reference requires logical name, digest, and size")


@dataclass
class Partition:
    name: str
    role: str
    root: str

    def __post_init__(self):
        if self.role not in PARTITION_ROLES:
            raise ValueError(f"unknown partition role: {self.role}")
        path_components(self.root)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _log_line(doc: dict) -> bytes:
    body = canonical_json(doc)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    return body + b"|" + f"{crc:08x}".encode() + b"\n"


def _parse_log_line(line: bytes) -> Optional[dict]:
    """Decode one log line; None for a torn or corrupt line."""
    if not line.endswith(b"\n"):
        return None
    body, sep, crc_hex = line[:-1].rpartition(b"|")
    if not sep or len(crc_hex) != 8:
        return None
    try:
        if zlib.crc32(body) & 0xFFFFFFFF != int(crc_hex, 16):
            return None
        return json.loads(body.decode())
    except (ValueError, UnicodeDecodeError):
        return None


class Store(ConditionsRead):
    """Durable master store; one writer at a time, any number of readers."""

    def __init__(self, path: str | Path, *, sync: bool = False):
        self.path = Path(path)
        self.sync = sync
        self._lock = threading.RLock()
        self._failpoints: dict[str, Callable[[], None]] = {}
        self._payload_cache: dict[str, bytes] = {}
        self._object_info_cache: dict[str, tuple[int, int, int]] = {}

        manifest_path = self.path / "manifest.json"
        if not manifest_path.exists():
            raise StorageError(f"not a store (no manifest.json): {self.path}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("format") != STORE_FORMAT:
            raise StorageError(f"unsupported store format: {manifest.get('format')}")
        self.store_id: str = manifest["store_id"]
        self._partitions: dict[str, Partition] = {
            name: Partition(name, p["role"], p["root"])
            for name, p in manifest["partitions"].items()
        }

        folders_doc = json.loads((self.path / "folders.json").read_text())
        self._folders: dict[str, Folder] = {}
        self._folder_partitions: dict[str, str] = {}
        self._tree = FoldersetTree()
        for p, f in folders_doc["folders"].items():
            folder = Folder(p, f["schema_id"], tuple(f["channels"]))
            self._tree.add(folder)
            self._folders[p] = folder
            self._folder_partitions[p] = f["partition"]

        tags_doc = json.loads((self.path / "tags.json").read_text())
        self._tag_nodes: dict[tuple[str, str], TagTreeNode] = {
            (n["owner"], n["name"]): TagTreeNode(n["owner"], n["name"], n["associations"])
            for n in tags_doc["nodes"]
        }

        ext_doc = json.loads((self.path / "externals.json").read_text())
        self._externals: dict[str, dict] = dict(ext_doc["files"])

        self._sequences: dict[tuple[str, int, str], IOVSequence] = {}
        self.state_stamp = 0
        self._replay_logs()

    # -- lifecycle -------------------------------------------------------------

    @classmethod
    def initialize(cls, path: str | Path, *, store_id: Optional[str] = None) -> "Store":
        path = Path(path)
        if (path / "manifest.json").exists():
            raise AlreadyExists(f"store already initialized at {path}")
        path.mkdir(parents=True, exist_ok=True)
        for sub in ("objects", "logs", "externals"):
            (path / sub).mkdir(exist_ok=True)
        manifest = {
            "format": STORE_FORMAT,
            "partitions": {},
            "store_id": store_id or str(uuid.uuid4()),
        }
        _atomic_write(path / "manifest.json", canonical_json(manifest))
        _atomic_write(path / "folders.json", canonical_json({"folders": {}}))
        _atomic_write(path / "tags.json", canonical_json({"nodes": []}))
        _atomic_write(path / "externals.json", canonical_json({"files": {}}))
        return cls(path)

    @classmethod
    def open(cls, path: str | Path, *, sync: bool = False) -> "Store":
        return cls(path, sync=sync)

    def close(self) -> None:
        self.checkpoint()

    # -- log replay / checkpoint -----------------------------------------------

    def _log_path(self, partition: str) -> Path:
        return self.path / "logs" / f"{partition}.log"

    def _replay_logs(self) -> None:
        offsets = {name: 0 for name in self._partitions}
        index_path = self.path / "index.json"
        if index_path.exists():
            try:
                index = json.loads(index_path.read_text())
            except ValueError:
                index = None
            if index and index.get("format") == STORE_FORMAT:
                usable = True
                for name, recorded in index["log_sizes"].items():
                    log = self._log_path(name)
                    actual = log.stat().st_size if log.exists() else 0
                    if name not in self._partitions or actual < recorded:
                        usable = False
                        break
                if usable:
                    for row in index["sequences"]:
                        seq = _sequence_from_index_row(row)
                        self._sequences[(seq.folder, seq.channel, seq.leaf_tag)] = seq
                    self.state_stamp = index["stamp"]
                    offsets.update(index["log_sizes"])

        for name in sorted(self._partitions):
            log = self._log_path(name)
            if not log.exists():
                continue
            with log.open("rb") as f:
                f.seek(offsets.get(name, 0))
                for line in f:
                    doc = _parse_log_line(line)
                    if doc is None:
                        break  # torn tail from an interrupted append
                    self._apply_log_record(doc)

    def _apply_log_record(self, doc: dict) -> None:
        key = (doc["f"], doc["c"], doc["g"])
        seq = self._sequences.get(key)
        if seq is None:
            seq = IOVSequence(doc["f"], doc["c"], doc["g"])
        ref = PayloadRef(
            kind=PayloadKind(doc["p"]["kind"]),
            digest=doc["p"]["digest"],
            size=doc["p"]["size"],
            schema_id=doc["p"]["schema_id"],
            logical_name=doc["p"].get("logical_name"),
        )
        new_seq = insert_iov(seq, doc["s"], ref)
        if new_seq.records[-1].insertion_index != doc["i"]:
            raise CorruptionError(
                f"log replay index mismatch for {key}: {doc['i']} vs "
                f"{new_seq.records[-1].insertion_index}"
            )
        self._sequences[key] = new_seq
        self.state_stamp += 1

    def checkpoint(self) -> None:
        """Rewrite index.json so the next open can skip replaying the logs."""
        with self._lock:
            log_sizes = {}
            for name in self._partitions:
                log = self._log_path(name)
                log_sizes[name] = log.stat().st_size if log.exists() else 0
            index = {
                "format": STORE_FORMAT,
                "log_sizes": log_sizes,
                "sequences": [
                    _sequence_to_index_row(self._sequences[k]) for k in sorted(self._sequences)
                ],
                "stamp": self.state_stamp,
            }
            _atomic_write(self.path / "index.json", canonical_json(index))

    # -- failpoints (test hook) --------------------------------------------------

    def _hit_failpoint(self, name: str) -> None:
        hook = self._failpoints.get(name)
        if hook is not None:
            hook()

    # -- administration ----------------------------------------------------------

    def create_partition(self, name: str, role: str, root: str) -> Partition:
        with self._lock:
            if name in self._partitions:
                raise AlreadyExists(f"partition already exists: {name}")
            for other in self._partitions.values():
                if (
                    other.root == root
                    or is_descendant(root, other.root)
                    or is_descendant(other.root, root)
                ):
                    raise PolicyViolation(
                        f"partition root {root!r} overlaps partition {other.name!r}"
                    )
            part = Partition(name, role, root)
            self._partitions[name] = part
            self._write_manifest()
            return part

    def _write_manifest(self) -> None:
        manifest = {
            "format": STORE_FORMAT,
            "partitions": {
                p.name: {"role": p.role, "root": p.root} for p in self._partitions.values()
            },
            "store_id": self.store_id,
        }
        _atomic_write(self.path / "manifest.json", canonical_json(manifest))

    def create_folder(
        self, partition: str, path: str, schema_id: str, channels: list[int]
    ) -> Folder:
        with self._lock:
            part = self._partitions.get(partition)
            if part is None:
                raise UnknownPartition(f"unknown partition: {partition}")
            if path in self._folders:
                raise AlreadyExists(f"folder already exists: {path}")
            if not (is_descendant(path, part.root) or path == part.root):
                raise PolicyViolation(
                    f"folder {path!r} is outside partition root {part.root!r}"
                )
            folder = Folder(path, schema_id, tuple(channels))
            self._tree.add(folder)  # rejects folder/folderset path collisions
            self._folders[path] = folder
            self._folder_partitions[path] = partition
            self._write_folders()
            return folder

    def folderset(self) -> FoldersetTree:
        return self._tree

    def _write_folders(self) -> None:
        doc = {
            "folders": {
                p: {
                    "channels": list(f.channels),
                    "partition": self._folder_partitions[p],
                    "schema_id": f.schema_id,
                }
                for p, f in sorted(self._folders.items())
            }
        }
        _atomic_write(self.path / "folders.json", canonical_json(doc))

    def define_tag(self, owner: str, name: str, associations: dict[str, str]) -> TagTreeNode:
        """Create an immutable hierarchical tag node at a folderset."""
        with self._lock:
            if (owner, name) in self._tag_nodes:
                raise PolicyViolation(
                    f"tag {name!r} at {owner!r} already defined; tags are never re-pointed"
                )
            node = TagTreeNode(owner, name, associations)
            for child, target in node.associations.items():
                child_path = node.child_path(child)
                if child_path in self._folders:
                    if not self._leaf_tag_exists(child_path, target):
                        raise UnknownTag(
                            f"association target {target!r} is not a leaf tag of {child_path!r}"
                        )
                elif any(is_descendant(p, child_path) or p == child_path for p in self._folders):
                    if (child_path, target) not in self._tag_nodes:
                        raise UnknownTag(
                            f"association target {target!r} is not a tag at {child_path!r}"
                        )
                else:
                    raise UnknownFolder(f"association child does not exist: {child_path!r}")
            self._tag_nodes[(owner, name)] = node
            self._write_tags()
            return node

    def _leaf_tag_exists(self, folder: str, leaf_tag: str) -> bool:
        info = self._folders.get(folder)
        if info is None:
            return False
        return any(
            (folder, ch, leaf_tag) in self._sequences for ch in info.channels
        )

    def _write_tags(self) -> None:
        doc = {
            "nodes": [
                {"associations": dict(n.associations), "name": n.name, "owner": n.owner}
                for _, n in sorted(self._tag_nodes.items())
            ]
        }
        _atomic_write(self.path / "tags.json", canonical_json(doc))

    # -- payload objects -----------------------------------------------------------

    def _object_path(self, digest: str) -> Path:
        return self.path / "objects" / digest[:2] / digest[2:4] / digest

    def import_object(self, digest: str, data: bytes) -> PayloadRef:
        """Store bytes under an explicit digest key; content addressing is enforced.

        Any attempt to place bytes whose sha256 differs from the key (including
        an overwrite attempt at an existing key) is a PolicyViolation.
        """
        actual = hashlib.sha256(data).hexdigest()
        if actual != digest:
            raise PolicyViolation(
                f"content does not match digest key {digest[:12]}..: payload objects "
                f"are immutable and content-addressed"
            )
        return self.put_payload(data)

    def put_payload(self, data: bytes, schema_id: str = "blob") -> PayloadRef:
        """Content-addressed, idempotent object write; returns an INLINE ref."""
        digest = hashlib.sha256(data).hexdigest()
        path = self._object_path(digest)
        if not path.exists():
            with self._lock:
                if not path.exists():
                    self._hit_failpoint("before-object-write")
                    crc = zlib.crc32(data) & 0xFFFFFFFF
                    compressed = zlib.compress(data, 6)
                    try:
                        path.parent.mkdir(parents=True, exist_ok=True)
                        tmp = path.with_name(path.name + ".tmp")
                        with tmp.open("wb") as f:
                            f.write(_OBJ_HEADER.pack(_OBJ_MAGIC, len(data), crc))
                            f.write(compressed)
                            if self.sync:
                                f.flush()
                                os.fsync(f.fileno())
                        tmp.replace(path)
                    except OSError as e:
                        raise StorageError(f"object write failed: {e}") from e
                    self._object_info_cache[digest] = (
                        len(data),
                        crc,
                        len(compressed),
                    )
        return PayloadRef(
            kind=PayloadKind.INLINE, digest=digest, size=len(data), schema_id=schema_id
        )

    def object_count(self) -> int:
        root = self.path / "objects"
        return sum(
            1
            for fan1 in root.iterdir()
            for fan2 in fan1.iterdir()
            for f in fan2.iterdir()
            if not f.name.endswith(".tmp")
        )

    def object_info(self, digest: str) -> tuple[int, int, int]:
        """(uncompressed size, crc32, stored length) for a stored object."""
        cached = self._object_info_cache.get(digest)
        if cached is not None:
            return cached
        path = self._object_path(digest)
        try:
            with path.open("rb") as f:
                magic, usize, crc = _OBJ_HEADER.unpack(f.read(_OBJ_HEADER.size))
            if magic != _OBJ_MAGIC:
                raise CorruptionError(f"bad object header for {digest}")
            stored_len = path.stat().st_size - _OBJ_HEADER.size
        except FileNotFoundError:
            raise CorruptionError(f"missing payload object {digest}") from None
        except OSError as e:
            raise StorageError(f"object read failed: {e}") from e
        info = (usize, crc, stored_len)
        self._object_info_cache[digest] = info
        return info

    def object_stored_bytes(self, digest: str) -> bytes:
        path = self._object_path(digest)
        try:
            return path.read_bytes()[_OBJ_HEADER.size :]
        except OSError as e:
            raise StorageError(f"object read failed: {e}") from e

    def payload_bytes(self, ref: PayloadRef) -> bytes:
        cached = self._payload_cache.get(ref.digest)
        if cached is not None:
            return cached
        usize, crc, _ = self.object_info(ref.digest)
        raw = zlib.decompress(self.object_stored_bytes(ref.digest))
        if len(raw) != usize or zlib.crc32(raw) & 0xFFFFFFFF != crc:
            raise CorruptionError(f"object {ref.digest} fails its buffer checksum")
        if hashlib.sha256(raw).hexdigest() != ref.digest:
            raise CorruptionError(f"object {ref.digest} fails its content digest")
        if len(self._payload_cache) >= 2048:
            self._payload_cache.clear()
        self._payload_cache[ref.digest] = raw
        return raw

    # -- external files --------------------------------------------------------------

    def _external_path(self, logical_name: str) -> Path:
        return self.path / "externals" / quote(logical_name, safe="")

    def put_external(
        self, logical_name: str, data: bytes, schema_id: str = "file"
    ) -> PayloadRef:
        """Register an external file so slices can package it; returns an EXTERNAL ref."""
        if not logical_name:
            raise ValueError("logical_name must be non-empty")
        digest = hashlib.sha256(data).hexdigest()
        with self._lock:
            existing = self._externals.get(logical_name)
            if existing is not None:
                if existing["digest"] != digest:
                    raise PolicyViolation(
                        f"external file {logical_name!r} already registered with "
                        f"different content"
                    )
            else:
                self._external_path(logical_name).write_bytes(data)
                self._externals[logical_name] = {"digest": digest, "size": len(data)}
                _atomic_write(
                    self.path / "externals.json",
                    canonical_json({"files": self._externals}),
                )
        return PayloadRef(
            kind=PayloadKind.EXTERNAL,
            digest=digest,
            size=len(data),
            schema_id=schema_id,
            logical_name=logical_name,
        )

    def external_bytes(self, logical_name: str) -> bytes:
        entry = self._externals.get(logical_name)
        if entry is None:
            raise MissingExternalFile(f"external file not registered: {logical_name!r}")
        try:
            data = self._external_path(logical_name).read_bytes()
        except OSError as e:
            raise MissingExternalFile(
                f"external file unreadable: {logical_name!r}: {e}"
            ) from e
        if hashlib.sha256(data).hexdigest() != entry["digest"]:
            raise CorruptionError(
                f"external file {logical_name!r} does not match its registered digest"
            )
        return data

    def externals(self) -> dict[str, dict]:
        return dict(self._externals)

    # -- commit pipeline ------------------------------------------------------------

    def commit(self, req: CommitRequest) -> IOVSequence:
        """Validate, store the payload, extend the sequence, persist; atomic.

        Returns the new sequence; the committed record is its last element.
        """
        with self._lock:
            folder = self._folders.get(req.folder)
            if folder is None:
                raise UnknownFolder(f"unknown folder: {req.folder}")
            if req.channel not in folder.channels:
                raise UnknownFolder(
                    f"channel {req.channel} not declared for folder {req.folder}"
                )
            if not req.leaf_tag:
                raise ValueError("leaf_tag must be non-empty")
            key = (req.folder, req.channel, req.leaf_tag)
            seq = self._sequences.get(key) or IOVSequence(req.folder, req.channel, req.leaf_tag)

            if req.inline_data is not None:
                ref = self.put_payload(req.inline_data, schema_id=folder.schema_id)
            else:
                registered = self._externals.get(req.external_logical_name)
                if registered is not None and registered["digest"] != req.external_digest:
                    raise PolicyViolation(
                        f"external reference digest for {req.external_logical_name!r} "
                        f"does not match the registered file"
                    )
                ref = PayloadRef(
                    kind=PayloadKind.EXTERNAL,
                    digest=req.external_digest,
                    size=req.external_size,
                    schema_id=folder.schema_id,
                    logical_name=req.external_logical_name,
                )

            new_seq = insert_iov(seq, req.since, ref)  # ExtendOnlyViolation propagates
            record = new_seq.records[-1]
            self._hit_failpoint("after-object-write")
            doc = {
                "c": req.channel,
                "f": req.folder,
                "g": req.leaf_tag,
                "i": record.insertion_index,
                "p": {
                    "digest": ref.digest,
                    "kind": ref.kind.value,
                    "logical_name": ref.logical_name,
                    "schema_id": ref.schema_id,
                    "size": ref.size,
                },
                "s": req.since,
                "a": req.author,
                "m": req.comment,
            }
            self._append_log(self._folder_partitions[req.folder], doc)
            self._sequences[key] = new_seq
            self.state_stamp += 1
            return new_seq

    def _append_log(self, partition: str, doc: dict) -> None:
        line = _log_line(doc)
        torn = self._failpoints.get("torn-log-append")
        try:
            with self._log_path(partition).open("ab") as f:
                if torn is not None:
                    f.write(line[: len(line) // 2])
                    f.flush()
                    torn()
                f.write(line)
                if self.sync:
                    f.flush()
                    os.fsync(f.fileno())
        except OSError as e:
            raise StorageError(f"log append failed: {e}") from e

    # -- forbidden operations (policy surface) ----------------------------------------

    def delete_record(self, *args, **kwargs):
        raise PolicyViolation("NO DELETE: records are immutable history")

    def delete_folder(self, *args, **kwargs):
        raise PolicyViolation("NO DELETE: folders are never removed")

    def delete_payload_object(self, *args, **kwargs):
        raise PolicyViolation("NO DELETE: payload objects are immutable")

    def update_record(self, *args, **kwargs):
        raise PolicyViolation("NO UPDATE: records are never modified in place")

    def repoint_leaf_tag(self, *args, **kwargs):
        raise PolicyViolation("NO UPDATE: a leaf tag is never re-pointed to another sequence")

    # -- ConditionsRead primitives ------------------------------------------------------

    def folder_info(self, path: str) -> Optional[Folder]:
        return self._folders.get(path)

    def folder_paths(self) -> list[str]:
        return sorted(self._folders)

    def folder_partition(self, path: str) -> Optional[str]:
        return self._folder_partitions.get(path)

    def partitions(self) -> dict[str, Partition]:
        return dict(self._partitions)

    def tag_nodes(self):
        return self._tag_nodes

    def sequence(self, folder: str, channel: int, leaf_tag: str) -> Optional[IOVSequence]:
        return self._sequences.get((folder, channel, leaf_tag))

    def sequences(self) -> list[IOVSequence]:
        return [self._sequences[k] for k in sorted(self._sequences)]

    def leaf_tags(self, folder: str) -> list[str]:
        return sorted({k[2] for k in self._sequences if k[0] == folder})

    # -- selection / snapshot -----------------------------------------------------------

    def resolve_selection(
        self, sel: SliceSelection
    ) -> tuple[list[Folder], list[IOVSequence], dict[str, dict]]:
        """Folders, range-filtered sequences, and external refs for a selection."""
        with self._lock:
            folders = dict(self._folders)
            sequences = dict(self._sequences)
            tag_nodes = dict(self._tag_nodes)

        if sel.folders is None:
            chosen = [
                p
                for p in sorted(folders)
                if sel.start_node == p or is_descendant(p, sel.start_node) or sel.start_node == ""
            ]
        else:
            chosen = []
            for p in sel.folders:
                if p not in folders:
                    raise UnknownFolder(f"selection names unknown folder: {p}")
                chosen.append(p)

        by_fc: dict[tuple[str, int], list[IOVSequence]] = {}
        for (f, c, _), seq in sequences.items():
            by_fc.setdefault((f, c), []).append(seq)

        out_seqs: list[IOVSequence] = []
        externals: dict[str, dict] = {}
        rng = sel.iov_range
        for path in chosen:
            info = folders[path]
            if sel.tag == "":
                leaf = None  # every leaf tag
            elif sel.start_node == path:
                leaf = sel.tag
            else:
                leaf = resolve_tag(tag_nodes, sel.start_node, sel.tag, path)
            for ch in info.channels:
                for seq in sorted(by_fc.get((path, ch), ()), key=lambda s: s.leaf_tag):
                    if leaf is not None and seq.leaf_tag != leaf:
                        continue
                    kept = tuple(
                        r
                        for r in seq.records
                        if r.interval.since < rng.until and rng.since < r.interval.until
                    )
                    out_seqs.append(IOVSequence(path, ch, seq.leaf_tag, kept))
                    for r in kept:
                        if r.payload.kind is PayloadKind.EXTERNAL:
                            externals[r.payload.logical_name] = {
                                "digest": r.payload.digest,
                                "size": r.payload.size,
                            }
        return [folders[p] for p in chosen], out_seqs, externals

    def snapshot(self, sel: SliceSelection, out_path: str | Path) -> SnapshotInfo:
        """Write a self-contained snapshot file; the master is unmodified."""
        folders, seqs, externals = self.resolve_selection(sel)
        object_index = {}
        for s in seqs:
            for r in s.records:
                if r.payload.kind is PayloadKind.INLINE:
                    object_index.setdefault(r.payload.digest, self.object_info(r.payload.digest))
        out_path = Path(out_path)
        with out_path.open("wb") as f:
            info = write_snapshot(
                f,
                store_id=self.store_id,
                state_stamp=self.state_stamp,
                selection=sel,
                partitions=[
                    {"name": p.name, "role": p.role, "root": p.root}
                    for p in self._partitions.values()
                ],
                folders=folders,
                folder_partitions=self._folder_partitions,
                tag_nodes=list(self._tag_nodes.values()),
                sequences=seqs,
                object_index=object_index,
                object_reader=self.object_stored_bytes,
                externals=externals,
            )
        info.path = out_path
        return info

    # -- maintenance ----------------------------------------------------------------------

    def scrub(self):
        """Recompute every stored object's digest against its key; report per object."""
        from .integrity import VerificationItem, VerificationReport

        items = []
        root = self.path / "objects"
        for fan1 in sorted(root.iterdir()):
            for fan2 in sorted(fan1.iterdir()):
                for obj in sorted(fan2.iterdir()):
                    if obj.name.endswith(".tmp"):
                        continue
                    digest = obj.name
                    try:
                        raw = zlib.decompress(obj.read_bytes()[_OBJ_HEADER.size :])
                        actual = hashlib.sha256(raw).hexdigest()
                    except (OSError, zlib.error) as e:
                        items.append(
                            VerificationItem(digest, digest, f"unreadable: {e}", False)
                        )
                        continue
                    items.append(VerificationItem(digest, digest, actual, actual == digest))
        return VerificationReport(tuple(items))

    def history_tuples(self) -> set[tuple]:
        """(folder, channel, tag, since, digest) of all records; grows monotonically."""
        return {
            (s.folder, s.channel, s.leaf_tag, r.interval.since, r.payload.digest)
            for s in self._sequences.values()
            for r in s.records
        }

    def state_digest(self) -> str:
        """Digest of the whole logical state (folders, tags, sequences, externals)."""
        doc = {
            "externals": self._externals,
            "folders": {
                p: {
                    "channels": list(f.channels),
                    "partition": self._folder_partitions[p],
                    "schema_id": f.schema_id,
                }
                for p, f in sorted(self._folders.items())
            },
            "partitions": {
                p.name: {"role": p.role, "root": p.root} for p in self._partitions.values()
            },
            "sequences": [
                _sequence_to_index_row(self._sequences[k]) for k in sorted(self._sequences)
            ],
            "tags": [
                {"associations": dict(n.associations), "name": n.name, "owner": n.owner}
                for _, n in sorted(self._tag_nodes.items())
            ],
        }
        return hashlib.sha256(canonical_json(doc)).hexdigest()


def _sequence_to_index_row(seq: IOVSequence) -> dict:
    return {
        "channel": seq.channel,
        "folder": seq.folder,
        "leaf_tag": seq.leaf_tag,
        "records": [
            [
                r.interval.since,
                r.interval.until,
                r.insertion_index,
                r.payload.kind.value,
                r.payload.digest,
                r.payload.size,
                r.payload.schema_id,
                r.payload.logical_name or "",
            ]
            for r in seq.records
        ],
    }


def _sequence_from_index_row(row: dict) -> IOVSequence:
    from .core import IOVInterval, IOVRecord

    records = tuple(
        IOVRecord(
            interval=IOVInterval(r[0], r[1]),
            insertion_index=r[2],
            payload=PayloadRef(
                kind=PayloadKind(r[3]),
                digest=r[4],
                size=r[5],
                schema_id=r[6],
                logical_name=r[7] or None,
            ),
        )
        for r in row["records"]
    )
    return IOVSequence(row["folder"], row["channel"], row["leaf_tag"], records)
