"""CLI tests: end-to-end flows, exit codes, machine output."""

import pytest

from iovstore.cli import (
    EXIT_BACKEND,
    EXIT_CORRUPT,
    EXIT_OK,
    EXIT_POLICY,
    EXIT_RESOLUTION,
    EXIT_USAGE,
    main,
)


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def store_dir(tmp_path):
    path = tmp_path / "store"
    assert main(["store", "init", "--store", str(path), "--partition", "det:OFFLINE"]) == 0
    return path


@pytest.fixture
def payload_file(tmp_path):
    p = tmp_path / "payload.bin"
    p.write_bytes(b"calibration blob v1")
    return p


class TestStoreFlow:
    def test_init_read_empty(self, store_dir, capsys):
        code, out, _ = run(
            capsys,
            "store", "read", "--store", str(store_dir),
            "--folder", "det/f", "--tag", "v1", "--at", "0",
        )
        assert code == EXIT_RESOLUTION  # no folders yet: unknown folder

    def test_end_to_end_commit_snapshot_query(self, store_dir, payload_file, tmp_path, capsys):
        base = ["--store", str(store_dir)]
        assert main(["store", "create-folder", *base, "det/f",
                     "--partition", "det", "--schema", "s", "--channels", "0"]) == 0
        for since in ("0", "100", "200"):
            assert main(["store", "commit", *base, "--folder", "det/f", "--tag", "v1",
                         "--since", since, "--payload-file", str(payload_file)]) == 0
        code, out, _ = run(
            capsys, "store", "read", *base,
            "--folder", "det/f", "--tag", "v1", "--at", "150", "--format", "machine",
        )
        assert code == EXIT_OK
        assert "records=1" in out and "since=100" in out

        snap = tmp_path / "s.iov"
        assert main(["store", "snapshot", *base, "--out", str(snap)]) == 0
        # the snapshot answers the same query through the read-only view
        from iovstore.snapshot import SnapshotView
        from iovstore.query import CanonicalQuery, encode_result_set
        from iovstore.store import Store

        q = CanonicalQuery.point("det/f", 0, "det/f", "v1", 150)
        master = Store.open(store_dir)
        assert encode_result_set(SnapshotView.open(snap).read_query(q)) == encode_result_set(
            master.read_query(q)
        )

    def test_extend_only_exit_code_and_message(self, store_dir, payload_file, capsys):
        base = ["--store", str(store_dir)]
        main(["store", "create-folder", *base, "det/f",
              "--partition", "det", "--schema", "s", "--channels", "0"])
        main(["store", "commit", *base, "--folder", "det/f", "--tag", "v1",
              "--since", "100", "--payload-file", str(payload_file)])
        code, _, err = run(
            capsys, "store", "commit", *base, "--folder", "det/f", "--tag", "v1",
            "--since", "50", "--payload-file", str(payload_file),
        )
        assert code == EXIT_POLICY
        assert "ExtendOnlyViolation" in err

    def test_info_machine_format(self, store_dir, capsys):
        code, out, _ = run(capsys, "store", "info", "--store", str(store_dir), "--format", "machine")
        assert code == EXIT_OK
        fields = dict(line.split("=", 1) for line in out.strip().splitlines())
        assert fields["folders"] == "0" and "store_id" in fields

    def test_iovstore_home_env(self, store_dir, capsys, monkeypatch):
        monkeypatch.setenv("IOVSTORE_HOME", str(store_dir))
        code, out, _ = run(capsys, "store", "info")
        assert code == EXIT_OK

    def test_missing_store_is_usage_error(self, capsys, monkeypatch):
        monkeypatch.delenv("IOVSTORE_HOME", raising=False)
        code, _, err = run(capsys, "store", "info")
        assert code == EXIT_USAGE


class TestSliceFlow:
    @pytest.fixture
    def built(self, store_dir, payload_file, tmp_path):
        base = ["--store", str(store_dir)]
        main(["store", "create-folder", *base, "det/f",
              "--partition", "det", "--schema", "s", "--channels", "0"])
        main(["store", "commit", *base, "--folder", "det/f", "--tag", "v1",
              "--since", "0", "--payload-file", str(payload_file)])
        ext = tmp_path / "ext.pool"
        ext.write_bytes(b"external pool file")
        main(["store", "put-external", *base, "ds/ext.pool", str(ext)])
        main(["store", "commit", *base, "--folder", "det/f", "--tag", "v1",
              "--since", "10", "--external", "ds/ext.pool"])
        out = tmp_path / "rel.tar"
        assert main(["slice", "build", *base, "--out", str(out)]) == 0
        return out

    def test_build_verify_open_cat(self, built, capsys):
        assert main(["slice", "verify", str(built)]) == EXIT_OK
        assert main(["slice", "open-check", str(built)]) == EXIT_OK
        code, out, _ = run(capsys, "slice", "cat", str(built), "ds/ext.pool")
        assert code == EXIT_OK

    def test_verify_detects_corruption(self, built, tmp_path, capsys):
        import tarfile

        with tarfile.open(built) as tar:
            snap = next(m for m in tar.getmembers() if m.name == "snapshot.iov")
        bit = (snap.offset_data + snap.size // 2) * 8
        bad = tmp_path / "bad.tar"
        assert main(["integrity", "inject", str(built), str(bad), "--kind", f"bitflip:{bit}"]) == 0
        code, out, _ = run(capsys, "slice", "verify", str(bad))
        assert code == EXIT_CORRUPT
        assert "FAIL" in out

    def test_open_check_corrupt_exit(self, built, tmp_path, capsys):
        bad = tmp_path / "bad.tar"
        main(["integrity", "inject", str(built), str(bad), "--kind", "truncate:600"])
        code, _, err = run(capsys, "slice", "open-check", str(bad))
        assert code == EXIT_CORRUPT


class TestQueryCommand:
    def test_query_via_dead_proxy_exits_backend_code(self, capsys):
        code, _, err = run(
            capsys, "query", "--endpoints", "proxy:http://127.0.0.1:1",
            "--folder", "det/f", "--tag", "v1", "--at", "0",
        )
        assert code == EXIT_BACKEND
        assert "AllBackendsFailed" in err

    def test_query_against_slice(self, tmp_path, capsys):
        from iovstore.harness import gen_store
        from iovstore.release import build_slice
        from iovstore.snapshot import SliceSelection

        store, _ = gen_store("minimal", 1, tmp_path / "s")
        slice_path = tmp_path / "rel.tar"
        build_slice(store, SliceSelection.everything(), slice_path)
        folder = store.folder_paths()[0]
        code, out, _ = run(
            capsys, "query", "--endpoints", f"slice:{slice_path}",
            "--folder", folder, "--tag", "v1", "--at", "0", "--format", "machine",
        )
        assert code == EXIT_OK
        assert "backend=slice" in out and "records=1" in out


class TestIntegrityCommands:
    def test_digest_and_transfer_check(self, tmp_path, capsys):
        a = tmp_path / "a"
        b = tmp_path / "b"
        a.write_bytes(b"same")
        b.write_bytes(b"same")
        code, out, _ = run(capsys, "integrity", "digest", str(a))
        assert code == EXIT_OK and str(a) in out
        assert main(["integrity", "transfer-check", str(a), str(b)]) == EXIT_OK
        b.write_bytes(b"diff")
        assert main(["integrity", "transfer-check", str(a), str(b)]) == EXIT_CORRUPT

    def test_manifest_verify_cycle(self, tmp_path, capsys):
        d = tmp_path / "files"
        d.mkdir()
        (d / "x.bin").write_bytes(b"xxxx")
        (d / "y.bin").write_bytes(b"yyyy")
        m = tmp_path / "sums.txt"
        assert main(["integrity", "manifest", str(d), "--out", str(m)]) == EXIT_OK
        assert main(["integrity", "verify", str(d), "--manifest", str(m)]) == EXIT_OK
        (d / "y.bin").write_bytes(b"ZZZZ")
        code, out, _ = run(capsys, "integrity", "verify", str(d), "--manifest", str(m))
        assert code == EXIT_CORRUPT
        assert "FAIL y.bin" in out


class TestScenarioCommands:
    def test_list(self, capsys):
        code, out, _ = run(capsys, "scenario", "list")
        assert code == EXIT_OK
        assert "frontier-speedup" in out and "slice-attach" in out

    def test_run_empty_machine_format(self, tmp_path, capsys):
        code, out, _ = run(
            capsys, "scenario", "run", "empty", "--out", str(tmp_path / "r"), "--format", "machine"
        )
        assert code == EXIT_OK
        assert "scenario=empty" in out
        assert (tmp_path / "r" / "report.kv").exists()

    def test_unknown_scenario_usage_error(self, capsys):
        code, _, err = run(capsys, "scenario", "run", "not-a-scenario")
        assert code == EXIT_USAGE
