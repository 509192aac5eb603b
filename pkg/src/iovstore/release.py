"""Build, verify, and open release slices.

A slice is a single POSIX ustar archive that carries everything a job needs
to answer every in-selection query with no other dependency:

    MANIFEST               canonical sorted text, digests of all other members
    snapshot.iov           the snapshot file (see snapshot module)
    catalog.txt            logical name -> member path/digest/size
    external/<name>        packaged external payload files (percent-encoded)

Determinism contract: the same store state and selection produce bit-identical
archives. Member order is fixed, tar metadata is zeroed (mtime 0, uid/gid 0,
empty owner names, mode 0644), the manifest is sorted text, and the manifest's
creation stamp is the source store's logical commit counter rather than wall
time. The manifest ends with a digest of itself, so every byte of every
member is covered by some check.

Manifest text format:

    iovslice-manifest-v1
    entry = <member name> <size> <sha256>        (sorted, one per member)
    selection = <canonical selection>
    source-store = <store id>
    state-stamp = <logical stamp>
    total-size = <sum of member sizes>
    manifest-digest = <sha256 of all preceding bytes>
"""

from __future__ import annotations

import hashlib
import io
import os
import re
import tarfile
from dataclasses import dataclass
from pathlib import Path
from typing import Optional
from urllib.parse import quote, unquote

from .errors import (
    CorruptMember,
    CorruptSlice,
    CorruptionError,
    MissingExternalFile,
    StorageError,
    UnknownLogicalName,
    UnsupportedVersion,
)
from .integrity import VerificationItem, VerificationReport
from .snapshot import SliceSelection, SnapshotView
from .store import Store
from .views import ConditionsRead

MANIFEST_HEADER = "iovslice-manifest-v1"
CATALOG_HEADER = "iovslice-catalog-v1"
MANIFEST_NAME = "MANIFEST"
SNAPSHOT_NAME = "snapshot.iov"
CATALOG_NAME = "catalog.txt"
EXTERNAL_PREFIX = "external/"

_VERSION_RE = re.compile(r"^iovslice-manifest-v(\d+)$")


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    size: int
    sha256: str


@dataclass(frozen=True)
class SliceManifest:
    source_store_id: str
    state_stamp: int
    selection: SliceSelection
    entries: tuple[ManifestEntry, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "entries", tuple(sorted(self.entries, key=lambda e: e.name))
        )

    @property
    def total_size(self) -> int:
        return sum(e.size for e in self.entries)

    def entry(self, name: str) -> Optional[ManifestEntry]:
        for e in self.entries:
            if e.name == name:
                return e
        return None

    def to_text(self) -> str:
        lines = [f"entry = {quote(e.name, safe='/')} {e.size} {e.sha256}" for e in self.entries]
        lines.append(f"selection = {self.selection.canonical()}")
        lines.append(f"source-store = {self.source_store_id}")
        lines.append(f"state-stamp = {self.state_stamp}")
        lines.append(f"total-size = {self.total_size}")
        body = MANIFEST_HEADER + "\n" + "\n".join(sorted(lines)) + "\n"
        digest = hashlib.sha256(body.encode()).hexdigest()
        return body + f"manifest-digest = {digest}\n"

    @classmethod
    def from_text(cls, text: str) -> "SliceManifest":
        # strict byte structure: exactly "\n"-terminated lines, so any flipped
        # byte (including a mangled terminator) breaks the self-digest below
        raw_lines = text.split("\n")
        if len(raw_lines) < 3 or raw_lines[-1] != "":
            raise CorruptSlice("slice manifest is not newline-terminated text")
        lines = raw_lines[:-1]
        # digest first: only a self-consistent manifest gets interpreted at all
        last = lines[-1]
        if not last.startswith("manifest-digest = "):
            raise CorruptSlice("slice manifest missing its self-digest")
        stated = last[len("manifest-digest = ") :]
        body = "\n".join(lines[:-1]) + "\n"
        if hashlib.sha256(body.encode()).hexdigest() != stated:
            raise CorruptSlice("slice manifest fails its self-digest")
        m = _VERSION_RE.match(lines[0])
        if not m:
            raise CorruptSlice(f"not a slice manifest: {lines[0]!r}")
        if int(m.group(1)) != 1:
            raise UnsupportedVersion(f"slice manifest version {m.group(1)} not supported")
        entries = []
        fields: dict[str, str] = {}
        try:
            for line in lines[1:-1]:
                key, sep, value = line.partition(" = ")
                if not sep:
                    raise CorruptSlice(f"bad manifest line: {line!r}")
                if key == "entry":
                    name, size, sha = value.rsplit(" ", 2)
                    entries.append(ManifestEntry(unquote(name), int(size), sha))
                else:
                    fields[key] = value
            manifest = cls(
                source_store_id=fields["source-store"],
                state_stamp=int(fields["state-stamp"]),
                selection=SliceSelection.from_canonical(fields["selection"]),
                entries=tuple(entries),
            )
        except (KeyError, ValueError) as e:
            raise CorruptSlice(f"unparseable slice manifest: {e}") from e
        if manifest.total_size != int(fields["total-size"]):
            raise CorruptSlice("slice manifest total-size does not match its entries")
        return manifest


@dataclass(frozen=True)
class CatalogEntry:
    logical_name: str
    member: str
    size: int
    sha256: str


@dataclass(frozen=True)
class FileCatalog:
    entries: tuple[CatalogEntry, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "entries", tuple(sorted(self.entries, key=lambda e: e.logical_name))
        )

    def lookup(self, logical_name: str) -> Optional[CatalogEntry]:
        for e in self.entries:
            if e.logical_name == logical_name:
                return e
        return None

    def to_text(self) -> str:
        lines = [CATALOG_HEADER]
        for e in self.entries:
            lines.append(
                f"{quote(e.logical_name, safe='')} {quote(e.member, safe='/')} "
                f"{e.size} {e.sha256}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "FileCatalog":
        lines = text.splitlines()
        if not lines or lines[0] != CATALOG_HEADER:
            raise CorruptSlice("not a slice catalog")
        entries = []
        for line in lines[1:]:
            if not line:
                continue
            try:
                logical, member, size, sha = line.split(" ")
                entries.append(CatalogEntry(unquote(logical), unquote(member), int(size), sha))
            except ValueError as e:
                raise CorruptSlice(f"bad catalog line: {line!r}") from e
        return cls(tuple(entries))


def _tar_member(tar: tarfile.TarFile, name: str, data: bytes) -> None:
    info = tarfile.TarInfo(name)
    info.size = len(data)
    info.mtime = 0
    info.uid = info.gid = 0
    info.uname = info.gname = ""
    info.mode = 0o644
    tar.addfile(info, io.BytesIO(data))


def external_member_name(logical_name: str) -> str:
    return EXTERNAL_PREFIX + quote(logical_name, safe="")


def build_slice(store: Store, sel: SliceSelection, out: str | Path) -> SliceManifest:
    """Package a selection into a self-contained archive at `out`.

    Deterministic: identical store state and selection produce byte-identical
    archives. Raises MissingExternalFile when include_external is set and an
    EXTERNAL reference has no resolvable, digest-matching source.
    """
    out = Path(out)
    snap_tmp = out.with_name(out.name + ".snapshot.tmp")
    try:
        info = store.snapshot(sel, snap_tmp)

        catalog_entries = []
        external_blobs: dict[str, bytes] = {}
        if sel.include_external:
            for logical, ref in sorted(info.externals.items()):
                try:
                    data = store.external_bytes(logical)
                except MissingExternalFile:
                    raise
                if hashlib.sha256(data).hexdigest() != ref["digest"]:
                    raise MissingExternalFile(
                        f"external file {logical!r} does not match the digest its "
                        f"references carry"
                    )
                member = external_member_name(logical)
                external_blobs[member] = data
                catalog_entries.append(
                    CatalogEntry(logical, member, len(data), ref["digest"])
                )
        catalog = FileCatalog(tuple(catalog_entries))
        catalog_bytes = catalog.to_text().encode()

        entries = [
            ManifestEntry(SNAPSHOT_NAME, info.size, info.file_sha256),
            ManifestEntry(CATALOG_NAME, len(catalog_bytes), hashlib.sha256(catalog_bytes).hexdigest()),
        ]
        for member in sorted(external_blobs):
            data = external_blobs[member]
            entries.append(ManifestEntry(member, len(data), hashlib.sha256(data).hexdigest()))
        manifest = SliceManifest(
            source_store_id=store.store_id,
            state_stamp=store.state_stamp,
            selection=sel,
            entries=tuple(entries),
        )
        manifest_bytes = manifest.to_text().encode()

        try:
            with tarfile.open(out, "w", format=tarfile.USTAR_FORMAT) as tar:
                _tar_member(tar, MANIFEST_NAME, manifest_bytes)
                _tar_member(tar, SNAPSHOT_NAME, snap_tmp.read_bytes())
                _tar_member(tar, CATALOG_NAME, catalog_bytes)
                for member in sorted(external_blobs):
                    _tar_member(tar, member, external_blobs[member])
        except OSError as e:
            raise StorageError(f"slice write failed: {e}") from e
        return manifest
    finally:
        snap_tmp.unlink(missing_ok=True)


class SliceHandle(ConditionsRead):
    """Open slice: the same read API as the master, plus catalog lookups.

    Immutable and safe to share across threads; external member reads use
    positioned reads on one file descriptor.
    """

    def __init__(self, path: str | Path, *, verify: str = "eager"):
        if verify not in ("eager", "lazy"):
            raise ValueError(f"verify must be 'eager' or 'lazy', got {verify!r}")
        self.path = Path(path)
        try:
            tar = tarfile.open(self.path, "r:")
        except (tarfile.TarError, OSError) as e:
            raise CorruptSlice(f"unreadable slice archive: {e}") from e
        with tar:
            try:
                members = {m.name: m for m in tar.getmembers()}
                manifest_member = members.get(MANIFEST_NAME)
                if manifest_member is None:
                    raise CorruptSlice("slice has no MANIFEST member")
                manifest_bytes = tar.extractfile(manifest_member).read()
            except (tarfile.TarError, OSError) as e:
                raise CorruptSlice(f"unreadable slice archive: {e}") from e
            self.manifest = SliceManifest.from_text(manifest_bytes.decode(errors="replace"))

            self._member_spans: dict[str, tuple[int, int]] = {
                m.name: (m.offset_data, m.size) for m in members.values()
            }
            listed = {e.name for e in self.manifest.entries} | {MANIFEST_NAME}
            if set(members) != listed:
                raise CorruptSlice(
                    f"archive members do not match manifest: have {sorted(members)}, "
                    f"manifest lists {sorted(listed)}"
                )

            try:
                snapshot_bytes = tar.extractfile(members[SNAPSHOT_NAME]).read()
                catalog_bytes = tar.extractfile(members[CATALOG_NAME]).read()
            except (tarfile.TarError, OSError, KeyError) as e:
                raise CorruptSlice(f"unreadable slice member: {e}") from e

        if verify == "eager":
            self._verify_members_eagerly(snapshot_bytes, catalog_bytes)

        self._check_member(SNAPSHOT_NAME, snapshot_bytes, CorruptSlice)
        self._check_member(CATALOG_NAME, catalog_bytes, CorruptSlice)
        self.snapshot = SnapshotView(snapshot_bytes, verify=(verify == "eager"))
        self.catalog = FileCatalog.from_text(catalog_bytes.decode(errors="replace"))
        self._fd = os.open(self.path, os.O_RDONLY)
        self._closed = False

    def _check_member(self, name: str, data: bytes, exc_type) -> None:
        entry = self.manifest.entry(name)
        if entry is None:
            raise exc_type(f"member {name!r} not listed in manifest")
        if len(data) != entry.size or hashlib.sha256(data).hexdigest() != entry.sha256:
            raise exc_type(f"member {name!r} does not match its manifest digest")

    def _verify_members_eagerly(self, snapshot_bytes: bytes, catalog_bytes: bytes) -> None:
        cache = {SNAPSHOT_NAME: snapshot_bytes, CATALOG_NAME: catalog_bytes}
        with tarfile.open(self.path, "r:") as tar:
            for entry in self.manifest.entries:
                data = cache.get(entry.name)
                if data is None:
                    try:
                        data = tar.extractfile(entry.name).read()
                    except (tarfile.TarError, OSError, KeyError) as e:
                        raise CorruptSlice(f"unreadable member {entry.name!r}: {e}") from e
                self._check_member(entry.name, data, CorruptSlice)

    # -- catalog ------------------------------------------------------------------

    def catalog_lookup(self, logical_name: str) -> bytes:
        """Bytes of a packaged external file, after its digest check."""
        entry = self.catalog.lookup(logical_name)
        if entry is None:
            raise UnknownLogicalName(f"not in slice catalog: {logical_name!r}")
        span = self._member_spans.get(entry.member)
        if span is None:
            raise CorruptMember(f"catalog member missing from archive: {entry.member!r}")
        offset, size = span
        data = os.pread(self._fd, size, offset)
        if len(data) != entry.size or hashlib.sha256(data).hexdigest() != entry.sha256:
            raise CorruptMember(
                f"member {entry.member!r} does not match its catalog digest"
            )
        return data

    # -- ConditionsRead delegation ---------------------------------------------------

    def folder_info(self, path):
        return self.snapshot.folder_info(path)

    def folder_paths(self):
        return self.snapshot.folder_paths()

    def tag_nodes(self):
        return self.snapshot.tag_nodes()

    def sequence(self, folder, channel, leaf_tag):
        return self.snapshot.sequence(folder, channel, leaf_tag)

    def payload_bytes(self, ref):
        return self.snapshot.payload_bytes(ref)

    def query_guard(self, q):
        self.snapshot.query_guard(q)

    def close(self) -> None:
        if not self._closed:
            os.close(self._fd)
            self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def open_slice(path: str | Path, *, verify: str = "eager") -> SliceHandle:
    """Open an archive as a read handle; eager verify checks every member digest."""
    return SliceHandle(path, verify=verify)


def _walk_members_leniently(data: bytes) -> dict[str, Optional[bytes]]:
    """Member name -> bytes (None when short), tolerating a truncated tail."""
    import io

    member_bytes: dict[str, Optional[bytes]] = {}
    try:
        tar = tarfile.open(fileobj=io.BytesIO(data), mode="r:")
    except (tarfile.TarError, OSError):
        return member_bytes
    with tar:
        while True:
            try:
                member = tar.next()
            except (tarfile.TarError, OSError):
                break
            if member is None:
                break
            end = member.offset_data + member.size
            member_bytes[member.name] = data[member.offset_data : end] if end <= len(data) else None
    return member_bytes


def verify_slice(path: str | Path) -> VerificationReport:
    """Recompute every member digest plus the snapshot trailer; never raises
    for corruption, only reports it."""
    path = Path(path)
    items: list[VerificationItem] = []

    try:
        data = path.read_bytes()
    except OSError as e:
        return VerificationReport(
            (VerificationItem("archive", "readable tar", f"unreadable: {e}", False),)
        )
    member_bytes = _walk_members_leniently(data)
    if not member_bytes:
        return VerificationReport(
            (VerificationItem("archive", "readable tar", "no parseable members", False),)
        )

    raw_manifest = member_bytes.get(MANIFEST_NAME)
    if raw_manifest is None:
        return VerificationReport(
            (VerificationItem(MANIFEST_NAME, "present", "missing or unreadable", False),)
        )
    try:
        manifest = SliceManifest.from_text(raw_manifest.decode(errors="replace"))
        items.append(VerificationItem(MANIFEST_NAME, "self-digest", "self-digest", True))
    except CorruptionError as e:
        return VerificationReport(
            (VerificationItem(MANIFEST_NAME, "self-digest", str(e), False),)
        )

    listed = {e.name for e in manifest.entries}
    for entry in manifest.entries:
        data = member_bytes.get(entry.name)
        if data is None:
            items.append(
                VerificationItem(entry.name, entry.sha256, "missing or unreadable", False)
            )
            continue
        actual = hashlib.sha256(data).hexdigest()
        ok = actual == entry.sha256 and len(data) == entry.size
        items.append(VerificationItem(entry.name, entry.sha256, actual, ok))

    for name in sorted(set(member_bytes) - listed - {MANIFEST_NAME}):
        items.append(VerificationItem(name, "not in archive", "unexpected member", False))

    snap = member_bytes.get(SNAPSHOT_NAME)
    if snap is not None and len(snap) > 32:
        trailer_ok = hashlib.sha256(snap[:-32]).digest() == snap[-32:]
        items.append(
            VerificationItem(
                f"{SNAPSHOT_NAME}#trailer",
                snap[-32:].hex(),
                hashlib.sha256(snap[:-32]).hexdigest(),
                trailer_ok,
            )
        )

    raw_catalog = member_bytes.get(CATALOG_NAME)
    if raw_catalog is not None:
        try:
            catalog = FileCatalog.from_text(raw_catalog.decode(errors="replace"))
            for centry in catalog.entries:
                mentry = manifest.entry(centry.member)
                ok = mentry is not None and mentry.sha256 == centry.sha256
                items.append(
                    VerificationItem(
                        f"catalog:{centry.logical_name}",
                        centry.sha256,
                        mentry.sha256 if mentry else "member not in manifest",
                        ok,
                    )
                )
        except CorruptionError as e:
            items.append(VerificationItem(CATALOG_NAME + "#parse", "parseable", str(e), False))

    return VerificationReport(tuple(items))
