"""End-to-end data-integrity primitives: checksums, digests, verification.

Redundancy is layered on purpose: a CRC-32 per compressed buffer, a strong
digest per file, and a digest list per archive are all independently
checkable, because no layer should assume the layer below never hands it
corrupted bytes. Detection only; there is no recovery here.

Checksum manifest text format (one line per item, sorted by name):

    iovstore-checksums-v1
    <name> <size> <crc32 hex8> <sha256 hex64>

Names are percent-encoded. Items named `<file>#obj/<digest>` describe a
deflate-compressed buffer embedded in a snapshot-format file: size and CRC-32
apply to the uncompressed buffer, the sha256 is its content digest.
"""

from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Optional, Union
from urllib.parse import quote, unquote

from .errors import AlgorithmMismatch, StorageError

CHECKSUM_MANIFEST_HEADER = "iovstore-checksums-v1"
DEFAULT_MAX_ATTEMPTS = 3
_CHUNK = 1 << 20


def buffer_checksum(data: bytes) -> int:
    """CRC-32 (IEEE, reflected, init all-ones, final complement) of `data`."""
    return zlib.crc32(data) & 0xFFFFFFFF


@dataclass(frozen=True)
class Digest:
    algorithm: str
    hex: str

    @classmethod
    def sha256_of(cls, data: bytes) -> "Digest":
        return cls("sha256", hashlib.sha256(data).hexdigest())


def file_digest(source: Union[str, Path, BinaryIO], algorithm: str = "sha256") -> Digest:
    """Strong digest computed in streaming fashion with bounded memory."""
    h = hashlib.new(algorithm)
    if isinstance(source, (str, Path)):
        try:
            with open(source, "rb") as f:
                while chunk := f.read(_CHUNK):
                    h.update(chunk)
        except OSError as e:
            raise StorageError(f"cannot digest {source}: {e}") from e
    else:
        while chunk := source.read(_CHUNK):
            h.update(chunk)
    return Digest(algorithm, h.hexdigest())


@dataclass(frozen=True)
class VerificationItem:
    name: str
    expected: str
    actual: str
    passed: bool


@dataclass(frozen=True)
class VerificationReport:
    items: tuple[VerificationItem, ...]

    @property
    def passed(self) -> bool:
        return all(item.passed for item in self.items)

    @property
    def n_failed(self) -> int:
        return sum(not item.passed for item in self.items)

    def failed_items(self) -> list[VerificationItem]:
        return [i for i in self.items if not i.passed]

    def to_text(self) -> str:
        lines = []
        for item in self.items:
            status = "PASS" if item.passed else "FAIL"
            lines.append(f"{status} {item.name} expected={item.expected} actual={item.actual}")
        lines.append(
            f"{'PASS' if self.passed else 'FAIL'} overall "
            f"({len(self.items) - self.n_failed}/{len(self.items)} items)"
        )
        return "\n".join(lines)


@dataclass(frozen=True)
class ChecksumEntry:
    name: str
    size: int
    crc32: int
    sha256: str


@dataclass(frozen=True)
class ChecksumManifest:
    entries: tuple[ChecksumEntry, ...]

    def __post_init__(self):
        ordered = tuple(sorted(self.entries, key=lambda e: e.name))
        names = [e.name for e in ordered]
        if len(set(names)) != len(names):
            raise ValueError("duplicate checksum manifest entries")
        object.__setattr__(self, "entries", ordered)

    def to_text(self) -> str:
        lines = [CHECKSUM_MANIFEST_HEADER]
        for e in self.entries:
            lines.append(f"{quote(e.name, safe='')} {e.size} {e.crc32:08x} {e.sha256}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ChecksumManifest":
        lines = text.splitlines()
        if not lines or lines[0] != CHECKSUM_MANIFEST_HEADER:
            raise ValueError("not a checksum manifest")
        entries = []
        for line in lines[1:]:
            if not line:
                continue
            name, size, crc_hex, sha = line.split(" ")
            entries.append(ChecksumEntry(unquote(name), int(size), int(crc_hex, 16), sha))
        return cls(tuple(entries))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "ChecksumManifest":
        return cls.from_text(Path(path).read_text())


def entry_for_file(path: str | Path, name: Optional[str] = None) -> ChecksumEntry:
    path = Path(path)
    crc = 0
    h = hashlib.sha256()
    size = 0
    with path.open("rb") as f:
        while chunk := f.read(_CHUNK):
            crc = zlib.crc32(chunk, crc)
            h.update(chunk)
            size += len(chunk)
    return ChecksumEntry(name or path.name, size, crc & 0xFFFFFFFF, h.hexdigest())


def manifest_for_paths(
    paths: Iterable[tuple[str, Path]], *, include_buffers: bool = True
) -> ChecksumManifest:
    """Manifest over (name, path) pairs; snapshot files also get buffer entries."""
    from .snapshot import SNAPSHOT_MAGIC, SnapshotView

    entries = []
    for name, path in paths:
        entries.append(entry_for_file(path, name))
        if include_buffers:
            with open(path, "rb") as f:
                magic = f.read(len(SNAPSHOT_MAGIC))
            if magic == SNAPSHOT_MAGIC:
                view = SnapshotView(Path(path).read_bytes())
                for obj in view.object_entries():
                    entries.append(
                        ChecksumEntry(f"{name}#obj/{obj.digest}", obj.usize, obj.crc32, obj.digest)
                    )
    return ChecksumManifest(tuple(entries))


def verify_after_produce(base: str | Path, manifest: ChecksumManifest) -> VerificationReport:
    """Re-read produced files from durable storage and check every manifest item.

    `base` is the produced file itself or the directory the entry names are
    relative to. Buffer items decompress the named object inside its snapshot
    file and check size, CRC-32, and content digest. Failures are reported,
    never raised; IO errors fail the affected items.
    """
    from .snapshot import SnapshotView

    base = Path(base)

    def resolve(name: str) -> Path:
        if base.is_dir():
            return base / name
        return base if name == base.name else base.parent / name

    items: list[VerificationItem] = []
    snapshot_views: dict[str, Optional[SnapshotView]] = {}

    def view_for(file_name: str) -> Optional[SnapshotView]:
        if file_name not in snapshot_views:
            try:
                snapshot_views[file_name] = SnapshotView(
                    resolve(file_name).read_bytes(), verify=False
                )
            except Exception:
                snapshot_views[file_name] = None
        return snapshot_views[file_name]

    for entry in manifest.entries:
        if "#obj/" in entry.name:
            file_name, digest = entry.name.split("#obj/", 1)
            view = view_for(file_name)
            obj = None
            if view is not None:
                obj = {o.digest: o for o in view.object_entries()}.get(digest)
            if obj is None:
                items.append(
                    VerificationItem(entry.name, digest, "missing or unreadable", False)
                )
                continue
            try:
                offset, stored_len, usize, crc = view._objects[digest]
                raw = zlib.decompress(view._data[offset : offset + stored_len])
                ok = (
                    len(raw) == entry.size
                    and buffer_checksum(raw) == entry.crc32
                    and hashlib.sha256(raw).hexdigest() == entry.sha256
                )
                actual = f"size={len(raw)} crc32={buffer_checksum(raw):08x}"
            except zlib.error as e:
                ok, actual = False, f"undecompressable: {e}"
            items.append(
                VerificationItem(
                    entry.name, f"size={entry.size} crc32={entry.crc32:08x}", actual, ok
                )
            )
        else:
            try:
                actual_entry = entry_for_file(resolve(entry.name), entry.name)
            except OSError as e:
                items.append(VerificationItem(entry.name, entry.sha256, f"IO error: {e}", False))
                continue
            ok = (
                actual_entry.size == entry.size
                and actual_entry.crc32 == entry.crc32
                and actual_entry.sha256 == entry.sha256
            )
            items.append(VerificationItem(entry.name, entry.sha256, actual_entry.sha256, ok))
    return VerificationReport(tuple(items))


# -- transfer verification ------------------------------------------------------


ACCEPT = "ACCEPT"
REJECT_AND_RETRY = "REJECT_AND_RETRY"


@dataclass(frozen=True)
class TransferOutcome:
    decision: str
    attempt: int
    terminal: bool
    cause: str = ""


def transfer_check(
    src: Digest, dst: Digest, attempt: int = 1, max_attempts: int = DEFAULT_MAX_ATTEMPTS
) -> TransferOutcome:
    """Compare source and destination digests after a transfer.

    ACCEPT iff the digests are equal. A mismatch is rejected at every attempt
    count; once the retry budget is spent the rejection is terminal, because
    silently accepting mismatched data is the one unrecoverable failure mode.
    """
    if src.algorithm != dst.algorithm:
        raise AlgorithmMismatch(
            f"cannot compare {src.algorithm} digest with {dst.algorithm} digest"
        )
    if src.hex == dst.hex:
        return TransferOutcome(ACCEPT, attempt, terminal=True)
    if attempt < max_attempts:
        return TransferOutcome(
            REJECT_AND_RETRY, attempt, terminal=False, cause="checksum mismatch"
        )
    return TransferOutcome(
        REJECT_AND_RETRY,
        attempt,
        terminal=True,
        cause="silent corruption risk: checksum mismatch persisted through retry budget",
    )


# -- corruption injection (test harness) ------------------------------------------


@dataclass(frozen=True)
class BitFlip:
    position: int  # bit index into the file; 0 is the LSB of byte 0


@dataclass(frozen=True)
class Truncate:
    keep: int  # number of leading bytes to keep


@dataclass(frozen=True)
class ZeroRange:
    start: int
    end: int  # zero bytes in [start, end)


Corruption = Union[BitFlip, Truncate, ZeroRange]


def inject_corruption(src: str | Path, corruption: Corruption, out: str | Path) -> None:
    """Write a deterministically corrupted copy of `src` to `out`; src untouched."""
    data = bytearray(Path(src).read_bytes())
    if isinstance(corruption, BitFlip):
        byte_pos, bit = divmod(corruption.position, 8)
        if not 0 <= byte_pos < len(data):
            raise ValueError(f"bit position {corruption.position} out of range")
        data[byte_pos] ^= 1 << bit
    elif isinstance(corruption, Truncate):
        if not 0 <= corruption.keep <= len(data):
            raise ValueError(f"truncate length {corruption.keep} out of range")
        data = data[: corruption.keep]
    elif isinstance(corruption, ZeroRange):
        if not 0 <= corruption.start <= corruption.end <= len(data):
            raise ValueError(
                f"zero range [{corruption.start}, {corruption.end}) out of range"
            )
        data[corruption.start : corruption.end] = bytes(corruption.end - corruption.start)
    else:
        raise ValueError(f"unknown corruption kind: {corruption!r}")
    Path(out).write_bytes(bytes(data))
