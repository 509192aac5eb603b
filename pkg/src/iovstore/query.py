"""Canonical queries and the versioned binary ResultSet encoding.

The canonical URL is the cache key of the whole read path, so it must be
injective on well-formed queries and byte-stable: fixed field order, names
percent-encoded with no safe characters, numbers in lowercase hex. Two
queries are equal exactly when their canonical URLs are equal strings.

Wire format (body of every query response, magic "IRS1", version 1):
    u16 version | u32 record count | records...
    record:
      u16 folder_len + folder utf8
      u32 channel | u64 since | u64 until | u64 insertion_index
      u8 payload kind (0 inline, 1 external)
      32 raw digest bytes | u64 payload size
      u16 schema_len + schema utf8
      u16 logical_len + logical utf8 (0 for inline)
      u64 data_len + data bytes (inline payload bytes; 0 for external)
All integers little-endian. The encoding is deterministic, so equal result
sets have equal bodies and equal validators (sha256 of the body).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from urllib.parse import quote, unquote

from .core import (
    MAX_CHANNEL,
    OPEN,
    PayloadKind,
    PayloadRef,
    path_components,
)
from .errors import MalformedQuery, UnsupportedVersion

QUERY_PATH_PREFIX = "/v1/q"
WIRE_MAGIC = b"IRS1"
WIRE_VERSION = 1

MODE_POINT = "point"
MODE_RANGE = "range"


@dataclass(frozen=True)
class CanonicalQuery:
    """One read request: folder + channel + tag addressing + point or range.

    `start_node` is the folderset the tag is defined at; when it equals the
    folder path, `tag` names the leaf tag directly.
    """

    folder: str
    channel: int
    start_node: str
    tag: str
    mode: str
    t0: int
    t1: int = 0

    def __post_init__(self):
        try:
            if not path_components(self.folder):
                raise ValueError("folder must be non-empty")
            path_components(self.start_node)
        except ValueError as e:
            raise MalformedQuery(str(e)) from e
        if not isinstance(self.channel, int) or not 0 <= self.channel <= MAX_CHANNEL:
            raise MalformedQuery(f"channel out of range: {self.channel!r}")
        if not self.tag:
            raise MalformedQuery("tag must be non-empty")
        if self.mode == MODE_POINT:
            if not 0 <= self.t0 < OPEN:
                raise MalformedQuery(f"query point out of range: {self.t0}")
            if self.t1 != 0:
                raise MalformedQuery("point queries carry no second bound")
        elif self.mode == MODE_RANGE:
            if not 0 <= self.t0 < OPEN or not 0 < self.t1 <= OPEN:
                raise MalformedQuery(f"range bounds out of range: [{self.t0}, {self.t1})")
            if self.t0 >= self.t1:
                raise MalformedQuery(f"empty query range: [{self.t0}, {self.t1})")
        else:
            raise MalformedQuery(f"unknown query mode: {self.mode!r}")

    @classmethod
    def point(cls, folder: str, channel: int, start_node: str, tag: str, t: int) -> "CanonicalQuery":
        return cls(folder, channel, start_node, tag, MODE_POINT, t)

    @classmethod
    def range(
        cls, folder: str, channel: int, start_node: str, tag: str, a: int, b: int
    ) -> "CanonicalQuery":
        return cls(folder, channel, start_node, tag, MODE_RANGE, a, b)


def canonical_url(q: CanonicalQuery) -> str:
    """Unique, stable URL (path + query string) for a well-formed query."""
    enc = lambda s: quote(s, safe="")
    parts = [
        f"f={enc(q.folder)}",
        f"c={q.channel:x}",
        f"s={enc(q.start_node)}",
        f"g={enc(q.tag)}",
    ]
    if q.mode == MODE_POINT:
        parts.append("m=p")
        parts.append(f"t={q.t0:x}")
    else:
        parts.append("m=r")
        parts.append(f"a={q.t0:x}")
        parts.append(f"b={q.t1:x}")
    return QUERY_PATH_PREFIX + "?" + "&".join(parts)


def parse_canonical_url(url: str) -> CanonicalQuery:
    """Strict inverse of canonical_url; anything non-canonical is rejected."""
    prefix = QUERY_PATH_PREFIX + "?"
    if not url.startswith(prefix):
        raise MalformedQuery(f"not a query URL: {url!r}")
    fields = []
    for item in url[len(prefix) :].split("&"):
        key, sep, value = item.partition("=")
        if not sep:
            raise MalformedQuery(f"bad query item: {item!r}")
        fields.append((key, value))
    keys = [k for k, _ in fields]
    if keys[:5] != ["f", "c", "s", "g", "m"]:
        raise MalformedQuery(f"non-canonical field order: {keys}")
    values = dict(fields)
    if len(values) != len(fields):
        raise MalformedQuery("duplicate query fields")

    def hexval(key: str) -> int:
        raw = values.get(key, "")
        if not raw or raw != raw.lower() or raw.startswith("0x"):
            raise MalformedQuery(f"bad hex value for {key!r}: {raw!r}")
        try:
            return int(raw, 16)
        except ValueError as e:
            raise MalformedQuery(f"bad hex value for {key!r}: {raw!r}") from e

    folder = unquote(values["f"])
    start = unquote(values["s"])
    tag = unquote(values["g"])
    channel = hexval("c")
    mode = values["m"]
    if mode == "p":
        if keys != ["f", "c", "s", "g", "m", "t"]:
            raise MalformedQuery(f"non-canonical point query fields: {keys}")
        q = CanonicalQuery.point(folder, channel, start, tag, hexval("t"))
    elif mode == "r":
        if keys != ["f", "c", "s", "g", "m", "a", "b"]:
            raise MalformedQuery(f"non-canonical range query fields: {keys}")
        q = CanonicalQuery.range(folder, channel, start, tag, hexval("a"), hexval("b"))
    else:
        raise MalformedQuery(f"unknown query mode: {mode!r}")
    if canonical_url(q) != url:
        raise MalformedQuery(f"URL is not canonical: {url!r}")
    return q


@dataclass(frozen=True)
class ResultRecord:
    folder: str
    channel: int
    since: int
    until: int
    insertion_index: int
    payload: PayloadRef
    data: bytes  # inline payload bytes; b"" for EXTERNAL refs


@dataclass(frozen=True)
class ResultSet:
    records: tuple[ResultRecord, ...]

    def __len__(self) -> int:
        return len(self.records)


_REC_FIXED = struct.Struct("<IQQQB")  # channel, since, until, idx, kind


def encode_result_set(rs: ResultSet) -> bytes:
    out = bytearray(WIRE_MAGIC)
    out += struct.pack("<HI", WIRE_VERSION, len(rs.records))
    for rec in rs.records:
        folder_b = rec.folder.encode()
        out += struct.pack("<H", len(folder_b))
        out += folder_b
        kind = 0 if rec.payload.kind is PayloadKind.INLINE else 1
        out += _REC_FIXED.pack(rec.channel, rec.since, rec.until, rec.insertion_index, kind)
        out += bytes.fromhex(rec.payload.digest)
        out += struct.pack("<Q", rec.payload.size)
        schema_b = rec.payload.schema_id.encode()
        out += struct.pack("<H", len(schema_b))
        out += schema_b
        logical_b = (rec.payload.logical_name or "").encode()
        out += struct.pack("<H", len(logical_b))
        out += logical_b
        out += struct.pack("<Q", len(rec.data))
        out += rec.data
    return bytes(out)


def decode_result_set(body: bytes) -> ResultSet:
    if body[:4] != WIRE_MAGIC:
        raise MalformedQuery("bad result-set magic")
    (version, count) = struct.unpack_from("<HI", body, 4)
    if version != WIRE_VERSION:
        raise UnsupportedVersion(f"result-set wire version {version} not supported")
    pos = 10
    records = []
    try:
        for _ in range(count):
            (folder_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            folder = body[pos : pos + folder_len].decode()
            pos += folder_len
            channel, since, until, idx, kind = _REC_FIXED.unpack_from(body, pos)
            pos += _REC_FIXED.size
            digest = body[pos : pos + 32].hex()
            pos += 32
            (size,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            (schema_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            schema = body[pos : pos + schema_len].decode()
            pos += schema_len
            (logical_len,) = struct.unpack_from("<H", body, pos)
            pos += 2
            logical = body[pos : pos + logical_len].decode() if logical_len else None
            pos += logical_len
            (data_len,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            data = body[pos : pos + data_len]
            if len(data) != data_len:
                raise MalformedQuery("truncated result-set body")
            pos += data_len
            payload = PayloadRef(
                kind=PayloadKind.INLINE if kind == 0 else PayloadKind.EXTERNAL,
                digest=digest,
                size=size,
                schema_id=schema,
                logical_name=logical,
            )
            records.append(ResultRecord(folder, channel, since, until, idx, payload, bytes(data)))
    except struct.error as e:
        raise MalformedQuery(f"truncated result-set body: {e}") from e
    if pos != len(body):
        raise MalformedQuery("trailing bytes after result-set records")
    return ResultSet(tuple(records))


def body_validator(body: bytes) -> str:
    """Strong validator of a response body: sha256 hex."""
    return hashlib.sha256(body).hexdigest()


def selection_key(q: CanonicalQuery) -> tuple:
    """Hashable identity; equal queries have equal keys (mirrors canonical_url)."""
    return (q.folder, q.channel, q.start_node, q.tag, q.mode, q.t0, q.t1)


def query_bounds(q: CanonicalQuery) -> tuple[int, int]:
    """The [a, b) window a query touches; a point t is the window [t, t+1)."""
    if q.mode == MODE_POINT:
        return q.t0, q.t0 + 1
    return q.t0, q.t1
