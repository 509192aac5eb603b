"""Uniform read API shared by the master store, snapshots, and slices.

Application code reads conditions through this one surface regardless of the
backing technology; backends only supply the primitive lookups. Results are
deterministically ordered (folder, channel, since) and inline payload bytes
are included in the records, so a given backend state always produces the
same encoded body for the same query.
"""

from __future__ import annotations

from typing import Mapping, Optional

from .core import (
    Folder,
    IOVSequence,
    PayloadKind,
    PayloadRef,
    TagTreeNode,
    resolve_iov,
    resolve_leaf_tag,
)
from .errors import NoValidRecord, UnknownChannel, UnknownFolder
from .query import (
    MODE_POINT,
    CanonicalQuery,
    ResultRecord,
    ResultSet,
    encode_result_set,
)


class ConditionsRead:
    """Backend-independent read operations over the primitive lookups."""

    # -- primitives each backend implements ----------------------------------

    def folder_info(self, path: str) -> Optional[Folder]:
        raise NotImplementedError

    def folder_paths(self) -> list[str]:
        raise NotImplementedError

    def tag_nodes(self) -> Mapping[tuple[str, str], TagTreeNode]:
        raise NotImplementedError

    def sequence(self, folder: str, channel: int, leaf_tag: str) -> Optional[IOVSequence]:
        raise NotImplementedError

    def payload_bytes(self, ref: PayloadRef) -> bytes:
        """Verified uncompressed bytes of an INLINE payload."""
        raise NotImplementedError

    def query_guard(self, q: CanonicalQuery) -> None:
        """Hook for selection-restricted views; masters accept everything."""

    # -- uniform read API ------------------------------------------------------

    def read_query(self, q: CanonicalQuery) -> ResultSet:
        self.query_guard(q)
        folder = self.folder_info(q.folder)
        if folder is None:
            raise UnknownFolder(f"unknown folder: {q.folder}")
        if q.channel not in folder.channels:
            raise UnknownChannel(f"channel {q.channel} not declared for folder {q.folder}")
        leaf = resolve_leaf_tag(self, q.start_node, q.tag, q.folder)
        seq = self.sequence(q.folder, q.channel, leaf)
        if seq is None:
            return ResultSet(())
        if q.mode == MODE_POINT:
            rec = resolve_iov(seq, q.t0)
            selected = [rec] if rec is not None else []
        else:
            selected = [
                r for r in seq.records if r.interval.since < q.t1 and q.t0 < r.interval.until
            ]
        out = []
        for rec in selected:
            data = (
                self.payload_bytes(rec.payload)
                if rec.payload.kind is PayloadKind.INLINE
                else b""
            )
            out.append(
                ResultRecord(
                    folder=q.folder,
                    channel=q.channel,
                    since=rec.interval.since,
                    until=rec.interval.until,
                    insertion_index=rec.insertion_index,
                    payload=rec.payload,
                    data=data,
                )
            )
        return ResultSet(tuple(out))

    def read_query_bytes(self, q: CanonicalQuery) -> bytes:
        return encode_result_set(self.read_query(q))

    def effective_payload(
        self, folder: str, channel: int, start_node: str, tag: str, t: int
    ) -> PayloadRef:
        """The payload in effect at t, or NoValidRecord."""
        info = self.folder_info(folder)
        if info is None:
            raise UnknownFolder(f"unknown folder: {folder}")
        leaf = resolve_leaf_tag(self, start_node, tag, folder)
        seq = self.sequence(folder, channel, leaf)
        rec = resolve_iov(seq, t) if seq is not None else None
        if rec is None:
            raise NoValidRecord(f"no record valid at t={t} for {folder} ch={channel} tag={leaf}")
        return rec.payload
