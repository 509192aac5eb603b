"""Snapshot format tests: equivalence with the master, gating, integrity."""

import pytest

from iovstore.core import OPEN, IOVInterval
from iovstore.errors import CorruptSlice, NoValidRecord, UnknownFolder, UnsupportedVersion
from iovstore.query import CanonicalQuery, encode_result_set
from iovstore.snapshot import SliceSelection, SnapshotView
from iovstore.store import CommitRequest, Store


def snap_bytes(store, sel=None):
    sel = sel or SliceSelection.everything()
    out = store.path.parent / "snap.iov"
    store.snapshot(sel, out)
    return out.read_bytes()


@pytest.fixture
def view(demo_store):
    return SnapshotView(snap_bytes(demo_store))


def random_point_queries(rng, n=1000):
    cases = [("det/a/f1", 0), ("det/a/f1", 1), ("det/a/f2", 0), ("det/b/f3", 0)]
    for _ in range(n):
        folder, ch = rng.choice(cases)
        yield CanonicalQuery.point(folder, ch, "", "GLOBAL-A", rng.randrange(0, 1200))


class TestEquivalence:
    def test_master_vs_snapshot_bytes(self, demo_store, view, rng):
        for q in random_point_queries(rng):
            master = encode_result_set(demo_store.read_query(q))
            snap = encode_result_set(view.read_query(q))
            assert master == snap

    def test_range_queries_match_too(self, demo_store, view, rng):
        for _ in range(300):
            a = rng.randrange(0, 600)
            q = CanonicalQuery.range("det/a/f1", 0, "", "GLOBAL-A", a, a + rng.randrange(1, 500))
            assert encode_result_set(demo_store.read_query(q)) == encode_result_set(
                view.read_query(q)
            )


class TestSelection:
    def test_range_gating(self, demo_store):
        sel = SliceSelection(
            folders=None, start_node="", tag="GLOBAL-A", iov_range=IOVInterval(100, 200)
        )
        view = SnapshotView(snap_bytes(demo_store, sel))
        ok = view.read_query(CanonicalQuery.point("det/a/f1", 0, "", "GLOBAL-A", 150))
        assert len(ok) == 1
        with pytest.raises(NoValidRecord):
            view.read_query(CanonicalQuery.point("det/a/f1", 0, "", "GLOBAL-A", 50))
        with pytest.raises(NoValidRecord):
            view.read_query(CanonicalQuery.range("det/a/f1", 0, "", "GLOBAL-A", 150, 300))

    def test_straddling_record_kept_whole(self, demo_store):
        # record [100, 250) straddles the selection start; it stays unclamped so
        # in-selection queries return master-identical bytes
        sel = SliceSelection(
            folders=None, start_node="", tag="GLOBAL-A", iov_range=IOVInterval(120, 200)
        )
        view = SnapshotView(snap_bytes(demo_store, sel))
        q = CanonicalQuery.point("det/a/f1", 0, "", "GLOBAL-A", 150)
        assert encode_result_set(view.read_query(q)) == encode_result_set(
            demo_store.read_query(q)
        )
        rec = view.read_query(q).records[0]
        assert (rec.since, rec.until) == (100, 250)

    def test_folder_subset(self, demo_store):
        sel = SliceSelection(
            folders=("det/a/f2",), start_node="", tag="GLOBAL-A", iov_range=IOVInterval(0, OPEN)
        )
        view = SnapshotView(snap_bytes(demo_store, sel))
        assert view.folder_paths() == ["det/a/f2"]
        with pytest.raises(UnknownFolder):
            view.read_query(CanonicalQuery.point("det/a/f1", 0, "", "GLOBAL-A", 1))

    def test_empty_store_snapshot(self, tmp_path):
        store = Store.initialize(tmp_path / "empty")
        view = SnapshotView(snap_bytes(store))
        assert view.folder_paths() == []
        with pytest.raises(UnknownFolder):
            view.read_query(CanonicalQuery.point("any/f", 0, "any/f", "v1", 1))


class TestFormat:
    def test_determinism(self, demo_store):
        assert snap_bytes(demo_store) == snap_bytes(demo_store)

    def test_trailer_tamper_detected(self, demo_store):
        data = bytearray(snap_bytes(demo_store))
        data[len(data) // 2] ^= 0x01
        with pytest.raises(CorruptSlice):
            SnapshotView(bytes(data))

    def test_bad_magic(self):
        with pytest.raises(CorruptSlice):
            SnapshotView(b"NOTSNAPS" + b"\x00" * 64)

    def test_unknown_version(self, demo_store):
        data = bytearray(snap_bytes(demo_store))
        data[8] = 99  # version u32 little-endian low byte
        with pytest.raises(UnsupportedVersion):
            SnapshotView(bytes(data), verify=False)

    def test_write_is_pure_read(self, demo_store):
        before = demo_store.state_digest()
        snap_bytes(demo_store)
        assert demo_store.state_digest() == before

    def test_payload_verification_on_read(self, demo_store):
        data = bytearray(snap_bytes(demo_store))
        view = SnapshotView(bytes(data), verify=False)
        entry = view.object_entries()[0]
        offset, stored_len, _, _ = view._objects[entry.digest]
        data[offset + stored_len // 2] ^= 0xFF
        corrupted = SnapshotView(bytes(data), verify=False)
        ref = None
        for seq in corrupted.sequences():
            for rec in seq.records:
                if rec.payload.digest == entry.digest:
                    ref = rec.payload
        assert ref is not None
        with pytest.raises(CorruptSlice):
            corrupted.payload_bytes(ref)

    def test_open_from_path(self, demo_store, tmp_path):
        out = tmp_path / "s.iov"
        demo_store.snapshot(SliceSelection.everything(), out)
        view = SnapshotView.open(out)
        assert view.store_id == demo_store.store_id
