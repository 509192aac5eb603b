"""The `iovstore` command: one binary, a subcommand tree per subsystem.

Exit codes (one per error class):

    0  success
    2  usage or configuration error (also what argparse emits)
    3  policy violation (extend-only, NO DELETE / NO UPDATE)
    4  IO / storage error
    5  corruption detected or verification failed
    6  resolution failure (unknown folder/tag/partition/name, no valid record)
    7  backend/network failure (upstream unavailable, all backends failed)

`--format machine` output is stable, line-oriented `key=value`; text output
is for humans and may change.
"""

from __future__ import annotations

import argparse
import math
import os
import signal
import sys
import threading
from pathlib import Path

from . import __version__
from .core import OPEN
from .errors import (
    AllBackendsFailed,
    ConfigError,
    CorruptionError,
    IovStoreError,
    MalformedQuery,
    PolicyViolation,
    ResolutionError,
    StorageError,
    UpstreamUnavailable,
)
from .query import CanonicalQuery, canonical_url
from .snapshot import SliceSelection, SnapshotView
from .store import CommitRequest, Store

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_POLICY = 3
EXIT_IO = 4
EXIT_CORRUPT = 5
EXIT_RESOLUTION = 6
EXIT_BACKEND = 7


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, PolicyViolation):
        return EXIT_POLICY
    if isinstance(exc, CorruptionError):
        return EXIT_CORRUPT
    if isinstance(exc, ResolutionError):
        return EXIT_RESOLUTION
    if isinstance(exc, (UpstreamUnavailable, AllBackendsFailed)):
        return EXIT_BACKEND
    if isinstance(exc, (StorageError, OSError)):
        return EXIT_IO
    if isinstance(exc, (MalformedQuery, ConfigError, ValueError)):
        return EXIT_USAGE
    if isinstance(exc, IovStoreError):
        return EXIT_USAGE
    return EXIT_IO


def _store_path(args) -> Path:
    if args.store:
        return Path(args.store)
    env = os.environ.get("IOVSTORE_HOME")
    if env:
        return Path(env)
    raise ConfigError("no store path: pass --store or set IOVSTORE_HOME")


def _parse_selection(args) -> SliceSelection:
    from .core import IOVInterval

    folders = None
    if getattr(args, "folders", None):
        folders = tuple(args.folders.split(","))
    since = getattr(args, "range_since", None)
    until = getattr(args, "range_until", None)
    rng = IOVInterval(
        since if since is not None else 0,
        until if until is not None else OPEN,
    )
    return SliceSelection(
        folders=folders,
        start_node=getattr(args, "start_node", "") or "",
        tag=getattr(args, "tag", "") or "",
        iov_range=rng,
        include_external=not getattr(args, "no_external", False),
    )


def _build_query(args) -> CanonicalQuery:
    start = args.start_node if args.start_node is not None else args.folder
    if args.at is not None:
        return CanonicalQuery.point(args.folder, args.channel, start, args.tag, args.at)
    if args.range_ is None:
        raise ConfigError("pass --at T or --range A B")
    a, b = args.range_
    return CanonicalQuery.range(args.folder, args.channel, start, args.tag, a, b)


def _print_result_set(rs, fmt: str) -> None:
    if fmt == "machine":
        print(f"records={len(rs.records)}")
        for i, r in enumerate(rs.records):
            print(
                f"record.{i}={r.folder} ch={r.channel} since={r.since} until={r.until} "
                f"idx={r.insertion_index} kind={r.payload.kind.value} "
                f"digest={r.payload.digest} size={r.payload.size}"
            )
    else:
        if not rs.records:
            print("(no records)")
        for r in rs.records:
            until = "OPEN" if r.until == OPEN else str(r.until)
            name = f" ({r.payload.logical_name})" if r.payload.logical_name else ""
            print(
                f"{r.folder} ch={r.channel} [{r.since}, {until}) idx={r.insertion_index} "
                f"{r.payload.kind.value} {r.payload.size}B {r.payload.digest[:12]}..{name}"
            )


# -- store commands ----------------------------------------------------------------


def cmd_store_init(args) -> int:
    store = Store.initialize(_store_path(args))
    for spec in args.partition or []:
        parts = spec.split(":")
        if len(parts) == 2:
            name, role = parts
            root = name
        elif len(parts) == 3:
            name, role, root = parts
        else:
            raise ConfigError(f"partition must be name:role[:root], got {spec!r}")
        store.create_partition(name, role, root)
    print(f"initialized store {store.store_id} at {store.path}")
    return EXIT_OK


def cmd_store_create_partition(args) -> int:
    store = Store.open(_store_path(args))
    part = store.create_partition(args.name, args.role, args.root or args.name)
    print(f"created partition {part.name} role={part.role} root={part.root}")
    return EXIT_OK


def cmd_store_create_folder(args) -> int:
    store = Store.open(_store_path(args))
    channels = [int(c) for c in args.channels.split(",")]
    folder = store.create_folder(args.partition, args.folder, args.schema, channels)
    print(f"created folder {folder.path} schema={folder.schema_id} channels={list(folder.channels)}")
    return EXIT_OK


def cmd_store_put_external(args) -> int:
    store = Store.open(_store_path(args))
    data = Path(args.file).read_bytes()
    ref = store.put_external(args.logical_name, data)
    print(f"registered {ref.logical_name} digest={ref.digest} size={ref.size}")
    return EXIT_OK


def cmd_store_commit(args) -> int:
    store = Store.open(_store_path(args), sync=args.sync)
    if args.payload_file is not None:
        req = CommitRequest(
            args.folder,
            args.channel,
            args.tag,
            args.since,
            inline_data=Path(args.payload_file).read_bytes(),
            author=args.author,
            comment=args.comment,
        )
    elif args.external is not None:
        entry = store.externals().get(args.external)
        if entry is None:
            raise ResolutionError(f"external file not registered: {args.external!r}")
        req = CommitRequest(
            args.folder,
            args.channel,
            args.tag,
            args.since,
            external_logical_name=args.external,
            external_digest=entry["digest"],
            external_size=entry["size"],
            author=args.author,
            comment=args.comment,
        )
    else:
        raise ConfigError("pass --payload-file or --external")
    seq = store.commit(req)
    rec = seq.records[-1]
    print(
        f"committed {args.folder} ch={args.channel} tag={args.tag} "
        f"since={rec.interval.since} idx={rec.insertion_index} digest={rec.payload.digest}"
    )
    return EXIT_OK


def cmd_store_define_tag(args) -> int:
    store = Store.open(_store_path(args))
    associations = {}
    for item in args.assoc:
        child, sep, target = item.partition("=")
        if not sep:
            raise ConfigError(f"association must be child=tag, got {item!r}")
        associations[child] = target
    node = store.define_tag(args.owner, args.name, associations)
    print(f"defined tag {node.name} at {node.owner!r} over {len(node.associations)} children")
    return EXIT_OK


def cmd_store_read(args) -> int:
    store = Store.open(_store_path(args))
    rs = store.read_query(_build_query(args))
    _print_result_set(rs, args.format)
    return EXIT_OK


def cmd_store_snapshot(args) -> int:
    store = Store.open(_store_path(args))
    info = store.snapshot(_parse_selection(args), args.out)
    print(
        f"snapshot {args.out}: {info.size} bytes, {info.n_folders} folders, "
        f"{info.n_records} records, sha256={info.file_sha256}"
    )
    return EXIT_OK


def cmd_store_info(args) -> int:
    store = Store.open(_store_path(args))
    rows = {
        "store_id": store.store_id,
        "state_stamp": store.state_stamp,
        "state_digest": store.state_digest(),
        "folders": len(store.folder_paths()),
        "sequences": len(store.sequences()),
        "partitions": ",".join(sorted(store.partitions())),
        "externals": len(store.externals()),
    }
    for k, v in sorted(rows.items()):
        print(f"{k}={v}" if args.format == "machine" else f"{k:<14} {v}")
    return EXIT_OK


def cmd_store_scrub(args) -> int:
    store = Store.open(_store_path(args))
    report = store.scrub()
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_CORRUPT


# -- slice commands ---------------------------------------------------------------


def cmd_slice_build(args) -> int:
    from .release import build_slice

    store = Store.open(_store_path(args))
    manifest = build_slice(store, _parse_selection(args), args.out)
    print(
        f"built {args.out}: {len(manifest.entries)} members, "
        f"{manifest.total_size} bytes, state-stamp={manifest.state_stamp}"
    )
    return EXIT_OK


def cmd_slice_verify(args) -> int:
    from .release import verify_slice

    report = verify_slice(args.archive)
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_CORRUPT


def cmd_slice_open_check(args) -> int:
    from .release import open_slice

    with open_slice(args.archive, verify="eager") as handle:
        print(
            f"ok: {args.archive} source-store={handle.manifest.source_store_id} "
            f"state-stamp={handle.manifest.state_stamp} "
            f"folders={len(handle.folder_paths())} catalog={len(handle.catalog.entries)}"
        )
    return EXIT_OK


def cmd_slice_cat(args) -> int:
    from .release import open_slice

    with open_slice(args.archive, verify="lazy") as handle:
        data = handle.catalog_lookup(args.logical_name)
    if args.out:
        Path(args.out).write_bytes(data)
        print(f"wrote {len(data)} bytes to {args.out}")
    else:
        sys.stdout.buffer.write(data)
    return EXIT_OK


# -- servers -----------------------------------------------------------------------


def _parse_listen(spec: str) -> tuple[str, int]:
    host, sep, port = spec.rpartition(":")
    if not sep:
        raise ConfigError(f"listen address must be host:port, got {spec!r}")
    return host, int(port)


def _run_until_signal(stop) -> None:
    done = threading.Event()

    def handler(signum, frame):
        done.set()

    signal.signal(signal.SIGINT, handler)
    signal.signal(signal.SIGTERM, handler)
    done.wait()
    stop()


def cmd_serve(args) -> int:
    from .cachetier import OriginServer

    kind, sep, target = args.backend.partition(":")
    if not sep or kind not in ("store", "slice", "snapshot"):
        raise ConfigError("backend must be store:PATH, snapshot:PATH, or slice:PATH")
    if kind == "store":
        backend = Store.open(Path(target))
    elif kind == "snapshot":
        backend = SnapshotView.open(Path(target))
    else:
        from .release import open_slice

        backend = open_slice(Path(target))
    host, port = _parse_listen(args.listen)
    ttl = args.ttl if args.ttl is None or args.ttl != "inf" else "inf"
    origin = OriginServer(
        backend, host, port, ttl=ttl, sim_rtt_s=args.sim_rtt_ms / 1000.0
    ).start()
    print(f"origin {origin.origin_id} serving {args.backend} on {origin.url}", flush=True)
    _run_until_signal(origin.stop)
    print("origin stopped")
    return EXIT_OK


def cmd_proxy(args) -> int:
    from .cachetier import CachingProxy, ProxyServer

    ttl_override = None
    if args.ttl_override is not None:
        ttl_override = math.inf if args.ttl_override == "inf" else float(args.ttl_override)
    proxy = CachingProxy(
        args.upstream,
        args.cache_dir,
        byte_budget=args.budget,
        ttl_override=ttl_override,
    )
    host, port = _parse_listen(args.listen)
    server = ProxyServer(proxy, host, port).start()
    print(f"proxy for {args.upstream} on {server.url}, cache at {args.cache_dir}", flush=True)
    _run_until_signal(server.stop)
    print("proxy stopped")
    return EXIT_OK


def cmd_query(args) -> int:
    from .cachetier import ConditionsClient

    endpoints = args.endpoints.split(",")
    with ConditionsClient(endpoints) as client:
        result = client.read(_build_query(args))
    if args.format == "machine":
        print(f"backend={result.backend_kind}")
        print(f"cache_status={result.cache_status}")
        print(f"validator={result.validator}")
    else:
        print(f"served by {result.backend_kind} ({result.cache_status})")
    _print_result_set(result.result_set, args.format)
    return EXIT_OK


# -- integrity ------------------------------------------------------------------------


def cmd_integrity_digest(args) -> int:
    from .integrity import file_digest

    for path in args.files:
        d = file_digest(path)
        print(f"{d.hex}  {path}")
    return EXIT_OK


def cmd_integrity_manifest(args) -> int:
    from .integrity import manifest_for_paths

    pairs = []
    for raw in args.paths:
        p = Path(raw)
        if p.is_dir():
            pairs.extend(
                (str(f.relative_to(p)), f) for f in sorted(p.rglob("*")) if f.is_file()
            )
        else:
            pairs.append((p.name, p))
    manifest = manifest_for_paths(pairs, include_buffers=not args.no_buffers)
    text = manifest.to_text()
    if args.out:
        Path(args.out).write_text(text)
        print(f"wrote {len(manifest.entries)} entries to {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_integrity_verify(args) -> int:
    from .integrity import ChecksumManifest, verify_after_produce

    manifest = ChecksumManifest.load(args.manifest)
    report = verify_after_produce(args.base, manifest)
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_CORRUPT


def cmd_integrity_inject(args) -> int:
    from .integrity import BitFlip, Truncate, ZeroRange, inject_corruption

    kind, _, rest = args.kind.partition(":")
    if kind == "bitflip":
        corruption = BitFlip(int(rest))
    elif kind == "truncate":
        corruption = Truncate(int(rest))
    elif kind == "zero":
        a, b = rest.split(":")
        corruption = ZeroRange(int(a), int(b))
    else:
        raise ConfigError(f"kind must be bitflip:POS, truncate:N, or zero:A:B, got {args.kind!r}")
    inject_corruption(args.src, corruption, args.out)
    print(f"wrote corrupted copy to {args.out}")
    return EXIT_OK


def cmd_integrity_transfer_check(args) -> int:
    from .integrity import file_digest, transfer_check

    src = file_digest(args.src)
    dst = file_digest(args.dst)
    outcome = transfer_check(src, dst, attempt=args.attempt, max_attempts=args.max_attempts)
    print(
        f"decision={outcome.decision} attempt={outcome.attempt} "
        f"terminal={str(outcome.terminal).lower()} cause={outcome.cause!r}"
    )
    return EXIT_OK if outcome.decision == "ACCEPT" else EXIT_CORRUPT


# -- scenarios --------------------------------------------------------------------------


def cmd_scenario_list(args) -> int:
    from .harness.scenario import SCENARIOS

    for name in sorted(SCENARIOS):
        defaults = " ".join(f"{k}={v}" for k, v in sorted(SCENARIOS[name].defaults.items()))
        print(f"{name:<22} {defaults}")
    return EXIT_OK


def cmd_scenario_run(args) -> int:
    from .harness.scenario import run_scenario

    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set needs key=value, got {item!r}")
        overrides[key] = value
    report = run_scenario(args.scenario, out_dir=args.out, overrides=overrides)
    sys.stdout.write(report.to_machine() if args.format == "machine" else report.to_text())
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def _add_store_arg(p):
    p.add_argument("--store", help="store directory (default: $IOVSTORE_HOME)")


def _add_format_arg(p):
    p.add_argument("--format", choices=("text", "machine"), default="text")


def _add_query_args(p):
    p.add_argument("--folder", required=True)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--start-node", dest="start_node", help="tag-tree start (default: the folder)")
    p.add_argument("--tag", required=True)
    p.add_argument("--at", type=int, help="point query at this validity time")
    p.add_argument("--range", dest="range_", nargs=2, type=int, metavar=("A", "B"))


def _add_selection_args(p):
    p.add_argument("--folders", help="comma-separated folder list (default: all)")
    p.add_argument("--start-node", dest="start_node", default="")
    p.add_argument("--tag", default="")
    p.add_argument("--range-since", dest="range_since", type=int)
    p.add_argument("--range-until", dest="range_until", type=int)
    p.add_argument("--no-external", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iovstore",
        description="Interval-of-validity conditions store, release slices, cache tier, harness.",
    )
    parser.add_argument("--version", action="version", version=f"iovstore {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    # store
    store = sub.add_parser("store", help="master store administration").add_subparsers(
        dest="subcommand", required=True
    )
    p = store.add_parser("init")
    _add_store_arg(p)
    p.add_argument("--partition", action="append", metavar="NAME:ROLE[:ROOT]")
    p.set_defaults(func=cmd_store_init)
    p = store.add_parser("create-partition")
    _add_store_arg(p)
    p.add_argument("name")
    p.add_argument("role", choices=("ONLINE", "OFFLINE", "SIMULATION"))
    p.add_argument("root", nargs="?")
    p.set_defaults(func=cmd_store_create_partition)
    p = store.add_parser("create-folder")
    _add_store_arg(p)
    p.add_argument("folder")
    p.add_argument("--partition", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--channels", default="0")
    p.set_defaults(func=cmd_store_create_folder)
    p = store.add_parser("put-external")
    _add_store_arg(p)
    p.add_argument("logical_name")
    p.add_argument("file")
    p.set_defaults(func=cmd_store_put_external)
    p = store.add_parser("commit")
    _add_store_arg(p)
    p.add_argument("--folder", required=True)
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--tag", required=True)
    p.add_argument("--since", type=int, required=True)
    p.add_argument("--payload-file")
    p.add_argument("--external", metavar="LOGICAL_NAME")
    p.add_argument("--author", default="")
    p.add_argument("--comment", default="")
    p.add_argument("--sync", action="store_true", help="fsync the log on commit")
    p.set_defaults(func=cmd_store_commit)
    p = store.add_parser("define-tag")
    _add_store_arg(p)
    p.add_argument("--owner", required=True)
    p.add_argument("--name", required=True)
    p.add_argument("--assoc", action="append", required=True, metavar="CHILD=TAG")
    p.set_defaults(func=cmd_store_define_tag)
    p = store.add_parser("read")
    _add_store_arg(p)
    _add_query_args(p)
    _add_format_arg(p)
    p.set_defaults(func=cmd_store_read)
    p = store.add_parser("snapshot")
    _add_store_arg(p)
    p.add_argument("--out", required=True)
    _add_selection_args(p)
    p.set_defaults(func=cmd_store_snapshot)
    p = store.add_parser("info")
    _add_store_arg(p)
    _add_format_arg(p)
    p.set_defaults(func=cmd_store_info)
    p = store.add_parser("scrub")
    _add_store_arg(p)
    p.set_defaults(func=cmd_store_scrub)

    # slice
    sl = sub.add_parser("slice", help="release slice packaging").add_subparsers(
        dest="subcommand", required=True
    )
    p = sl.add_parser("build")
    _add_store_arg(p)
    p.add_argument("--out", required=True)
    _add_selection_args(p)
    p.set_defaults(func=cmd_slice_build)
    p = sl.add_parser("verify")
    p.add_argument("archive")
    p.set_defaults(func=cmd_slice_verify)
    p = sl.add_parser("open-check")
    p.add_argument("archive")
    p.set_defaults(func=cmd_slice_open_check)
    p = sl.add_parser("cat")
    p.add_argument("archive")
    p.add_argument("logical_name")
    p.add_argument("--out")
    p.set_defaults(func=cmd_slice_cat)

    # serve / proxy / query
    p = sub.add_parser("serve", help="run an origin server")
    p.add_argument("--backend", required=True, metavar="store:PATH|snapshot:PATH|slice:PATH")
    p.add_argument("--listen", default="127.0.0.1:8040")
    p.add_argument("--ttl", help="seconds or 'inf' (default: by backend kind)")
    p.add_argument("--sim-rtt-ms", type=float, default=0.0)
    p.set_defaults(func=cmd_serve)
    p = sub.add_parser("proxy", help="run a caching proxy")
    p.add_argument("--listen", default="127.0.0.1:8041")
    p.add_argument("--upstream", required=True)
    p.add_argument("--cache-dir", required=True)
    p.add_argument("--budget", type=int, default=256 << 20)
    p.add_argument("--ttl-override", help="seconds or 'inf'")
    p.set_defaults(func=cmd_proxy)
    p = sub.add_parser("query", help="failover client read")
    p.add_argument("--endpoints", required=True, help="comma list, e.g. proxy:URL,origin:URL,slice:PATH")
    _add_query_args(p)
    _add_format_arg(p)
    p.set_defaults(func=cmd_query)

    # integrity
    integ = sub.add_parser("integrity", help="checksums and corruption tools").add_subparsers(
        dest="subcommand", required=True
    )
    p = integ.add_parser("digest")
    p.add_argument("files", nargs="+")
    p.set_defaults(func=cmd_integrity_digest)
    p = integ.add_parser("manifest")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out")
    p.add_argument("--no-buffers", action="store_true")
    p.set_defaults(func=cmd_integrity_manifest)
    p = integ.add_parser("verify")
    p.add_argument("base", help="produced file or directory")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_integrity_verify)
    p = integ.add_parser("inject")
    p.add_argument("src")
    p.add_argument("out")
    p.add_argument("--kind", required=True, metavar="bitflip:POS|truncate:N|zero:A:B")
    p.set_defaults(func=cmd_integrity_inject)
    p = integ.add_parser("transfer-check")
    p.add_argument("src")
    p.add_argument("dst")
    p.add_argument("--attempt", type=int, default=1)
    p.add_argument("--max-attempts", type=int, default=3)
    p.set_defaults(func=cmd_integrity_transfer_check)

    # scenario
    scn = sub.add_parser("scenario", help="bundled experiments").add_subparsers(
        dest="subcommand", required=True
    )
    p = scn.add_parser("list")
    p.set_defaults(func=cmd_scenario_list)
    p = scn.add_parser("run")
    p.add_argument("scenario", help="bundled name or config file path")
    p.add_argument("--out", help="directory for report files")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    _add_format_arg(p)
    p.set_defaults(func=cmd_scenario_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return EXIT_IO
    except KeyboardInterrupt:
        return 130
    except Exception as e:
        code = exit_code_for(e)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
