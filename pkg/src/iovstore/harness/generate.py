"""Synthetic store generation and workload trace generation.

Store presets mirror the measured production profiles at desk scale:

    minimal      1 folder, 1 record (smoke tests)
    geometry     872 folders in 8 subsystem groups, ~33 MB of payload; a full
                 snapshot lands in the 20-50 MB band
    reco         15 subsystems x online/offline partitions, payloads sized so
                 an 11K-query job reads >= 70 MB
    cms          use-case partitioned, ~10 KB payloads for ~60 MB jobs
    lhcb         direct-access profile, ~40 MB jobs
    mc-external  hybrid store: 25 external datasets behind a file catalog
    tiny / pool  small stores for cache-dedup and failover replays

Workload profiles fix the per-job query count (and optionally a per-job byte
target); gen_workload draws a distinct-query pool against the store, records
the oracle body digest of every pool entry, and lays events out on job start
times from an arrival model. Everything is deterministic from the seed.
"""

from __future__ import annotations

import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..core import OPEN
from ..errors import UnreachableByteTarget
from ..query import CanonicalQuery, body_validator, selection_key
from ..store import CommitRequest, Store
from ..views import ConditionsRead
from .arrivals import ArrivalModel, arrival_times

_STORE_ID_NAMESPACE = uuid.UUID("8a0a3a76-6f6e-4a57-9d2e-35f4a1f0c9b1")


@dataclass(frozen=True)
class StoreSpec:
    """Size parameters for a synthetic store."""

    name: str
    partitions: tuple[tuple[str, str], ...]  # (name, role); root == name
    groups_per_partition: int
    folders_per_group: int
    channels: tuple[int, ...]
    records_per_sequence: int
    payload_bytes: tuple[int, int]  # uniform [min, max]
    time_step: int = 1000
    leaf_tag: str = "v1"
    global_tag: str = "GLOBAL-A"
    external_datasets: int = 0
    files_per_dataset: int = 0
    external_bytes: tuple[int, int] = (0, 0)
    schema_prefix: str = "schema"


STORE_PRESETS: dict[str, StoreSpec] = {
    "minimal": StoreSpec(
        name="minimal",
        partitions=(("main", "OFFLINE"),),
        groups_per_partition=1,
        folders_per_group=1,
        channels=(0,),
        records_per_sequence=1,
        payload_bytes=(64, 64),
    ),
    "geometry": StoreSpec(
        name="geometry",
        partitions=(("geom", "OFFLINE"),),
        groups_per_partition=8,
        folders_per_group=109,  # 872 folders total
        channels=(0,),
        records_per_sequence=4,
        payload_bytes=(7000, 12000),
    ),
    "reco": StoreSpec(
        name="reco",
        partitions=(("cond-online", "ONLINE"), ("cond-offline", "OFFLINE")),
        groups_per_partition=15,  # 15 subsystems, two schemas each
        folders_per_group=20,
        channels=(0, 1),
        records_per_sequence=10,
        payload_bytes=(5000, 11000),
    ),
    "cms": StoreSpec(
        name="cms",
        partitions=(("cms-prompt", "OFFLINE"), ("cms-mc", "SIMULATION")),
        groups_per_partition=10,
        folders_per_group=20,
        channels=(0,),
        records_per_sequence=8,
        payload_bytes=(9000, 11000),
    ),
    "lhcb": StoreSpec(
        name="lhcb",
        partitions=(("lhcb-cond", "OFFLINE"),),
        groups_per_partition=8,
        folders_per_group=15,
        channels=(0,),
        records_per_sequence=6,
        payload_bytes=(9000, 11000),
    ),
    "mc-external": StoreSpec(
        name="mc-external",
        partitions=(("mc", "SIMULATION"),),
        groups_per_partition=5,
        folders_per_group=5,
        channels=(0,),
        records_per_sequence=2,
        payload_bytes=(2000, 4000),
        external_datasets=25,
        files_per_dataset=8,
        external_bytes=(4000, 12000),
    ),
    "tiny": StoreSpec(
        name="tiny",
        partitions=(("main", "OFFLINE"),),
        groups_per_partition=4,
        folders_per_group=10,
        channels=(0,),
        records_per_sequence=5,
        payload_bytes=(1500, 3000),
    ),
    "pool": StoreSpec(
        name="pool",
        partitions=(("main", "OFFLINE"),),
        groups_per_partition=8,
        folders_per_group=25,
        channels=(0,),
        records_per_sequence=6,
        payload_bytes=(1000, 2500),
    ),
}


@dataclass
class GenReport:
    store_id: str
    state_digest: str
    n_folders: int
    n_sequences: int
    n_records: int
    inline_bytes: int
    n_external_files: int
    external_bytes: int


def gen_store(spec: StoreSpec | str, seed: int, path: str | Path) -> tuple[Store, GenReport]:
    """Build a synthetic store at `path`; fully determined by (spec, seed)."""
    if isinstance(spec, str):
        spec = STORE_PRESETS[spec]
    rng = np.random.default_rng(seed)
    store_id = str(uuid.uuid5(_STORE_ID_NAMESPACE, f"{spec.name}:{seed}"))
    store = Store.initialize(path, store_id=store_id)

    inline_bytes = 0
    n_records = 0
    group_names: dict[str, list[str]] = {}
    for pname, role in spec.partitions:
        store.create_partition(pname, role, pname)
        group_names[pname] = [f"{pname}/det{g:02d}" for g in range(spec.groups_per_partition)]
        for group in group_names[pname]:
            for i in range(spec.folders_per_group):
                folder = f"{group}/f{i:03d}"
                store.create_folder(
                    pname, folder, f"{spec.schema_prefix}-{group.rsplit('/', 1)[1]}", list(spec.channels)
                )
                lo, hi = spec.payload_bytes
                for ch in spec.channels:
                    for r in range(spec.records_per_sequence):
                        size = int(rng.integers(lo, hi + 1))
                        data = rng.integers(0, 256, size, dtype=np.uint8).tobytes()
                        store.commit(
                            CommitRequest(
                                folder,
                                ch,
                                spec.leaf_tag,
                                since=r * spec.time_step,
                                inline_data=data,
                                author="gen",
                            )
                        )
                        inline_bytes += size
                        n_records += 1

    n_external = 0
    external_bytes = 0
    if spec.external_datasets:
        pname = spec.partitions[0][0]
        ext_group = f"{pname}/ext"
        lo, hi = spec.external_bytes
        for d in range(spec.external_datasets):
            folder = f"{ext_group}/ds{d:02d}"
            store.create_folder(pname, folder, "pool-file", [0])
            for j in range(spec.files_per_dataset):
                logical = f"dataset{d:02d}/file_{j:03d}.pool"
                size = int(rng.integers(lo, hi + 1))
                data = rng.integers(0, 256, size, dtype=np.uint8).tobytes()
                ref = store.put_external(logical, data)
                store.commit(
                    CommitRequest(
                        folder,
                        0,
                        spec.leaf_tag,
                        since=j * spec.time_step,
                        external_logical_name=logical,
                        external_digest=ref.digest,
                        external_size=ref.size,
                        author="gen",
                    )
                )
                n_external += 1
                external_bytes += size
                n_records += 1

    # tag tree bottom-up: per-group nodes, per-partition nodes, one global root
    all_folders = set(store.folder_paths())
    for pname, _ in spec.partitions:
        groups = list(group_names[pname])
        if spec.external_datasets and pname == spec.partitions[0][0]:
            groups.append(f"{pname}/ext")
        for group in groups:
            if group.endswith("/ext"):
                children = {
                    f"ds{d:02d}": spec.leaf_tag for d in range(spec.external_datasets)
                }
            else:
                children = {
                    f"f{i:03d}": spec.leaf_tag
                    for i in range(spec.folders_per_group)
                    if f"{group}/f{i:03d}" in all_folders
                }
            store.define_tag(group, f"TAG-{group.replace('/', '-')}", children)
        store.define_tag(
            pname,
            f"TAG-{pname}",
            {g.rsplit("/", 1)[1]: f"TAG-{g.replace('/', '-')}" for g in groups},
        )
    store.define_tag(
        "", spec.global_tag, {pname: f"TAG-{pname}" for pname, _ in spec.partitions}
    )

    store.checkpoint()
    report = GenReport(
        store_id=store_id,
        state_digest=store.state_digest(),
        n_folders=len(store.folder_paths()),
        n_sequences=len(store.sequences()),
        n_records=n_records,
        inline_bytes=inline_bytes,
        n_external_files=n_external,
        external_bytes=external_bytes,
    )
    return store, report


@dataclass(frozen=True)
class WorkloadProfile:
    """Per-job access profile: query count, byte target, mix."""

    name: str
    n_queries: int
    target_bytes: Optional[int] = None
    target_kind: str = "approx"  # "approx" (+-10%) or "at_least"
    distinct_queries: Optional[int] = None  # None: every query distinct
    range_fraction: float = 0.0
    think_time_s: float = 0.0

    def __post_init__(self):
        if self.n_queries < 1:
            raise ValueError("n_queries must be >= 1")
        if self.target_kind not in ("approx", "at_least"):
            raise ValueError(f"unknown target kind: {self.target_kind!r}")
        if not 0.0 <= self.range_fraction <= 1.0:
            raise ValueError("range_fraction must be in [0, 1]")


PROFILES: dict[str, WorkloadProfile] = {
    # a typical geometry job: ~3K queries against the static replica
    "geometry-job": WorkloadProfile("geometry-job", n_queries=3000, range_fraction=0.1),
    # reconstruction: ~11K queries reading >= 70 MB of database-resident data
    "reco-job": WorkloadProfile(
        "reco-job", n_queries=11000, target_bytes=70_000_000, target_kind="at_least"
    ),
    "cms-job": WorkloadProfile("cms-job", n_queries=6000, target_bytes=60_000_000),
    "lhcb-job": WorkloadProfile("lhcb-job", n_queries=4000, target_bytes=40_000_000),
    "dedup-job": WorkloadProfile("dedup-job", n_queries=1000, distinct_queries=500),
    "failover-job": WorkloadProfile("failover-job", n_queries=2000, distinct_queries=2000),
}


@dataclass
class Trace:
    """Generated query events plus per-query oracle digests.

    Events are stored columnar (numpy) so million-event traces stay cheap;
    queries/oracles are deduplicated into a pool indexed by query_idx.
    """

    profile_name: str
    seed: int
    n_jobs: int
    queries: tuple[CanonicalQuery, ...]
    oracle_digests: tuple[str, ...]
    oracle_sizes: np.ndarray  # bytes of each pool entry's body
    times: np.ndarray  # event times, non-decreasing
    job_ids: np.ndarray
    query_idx: np.ndarray
    think_time_s: float = 0.0

    @property
    def n_events(self) -> int:
        return len(self.query_idx)

    @property
    def n_distinct(self) -> int:
        return len(self.queries)

    @property
    def total_oracle_bytes(self) -> int:
        return int(self.oracle_sizes[self.query_idx].sum())

    def job_event_indices(self) -> dict[int, np.ndarray]:
        """Event indices per job, each in issue order."""
        order = np.argsort(self.times, kind="stable")
        out: dict[int, list[int]] = {}
        for idx in order:
            out.setdefault(int(self.job_ids[idx]), []).append(int(idx))
        return {job: np.asarray(ix) for job, ix in out.items()}


def _query_pool(
    view: ConditionsRead,
    profile: WorkloadProfile,
    rng: np.random.Generator,
    n_distinct: int,
) -> list[CanonicalQuery]:
    """Distinct queries drawn over the view's folders/channels/time spans."""
    root_tags = sorted(name for (owner, name) in view.tag_nodes() if owner == "")
    global_tag = root_tags[0] if root_tags else None

    folders = view.folder_paths()
    if not folders:
        raise UnreachableByteTarget("store has no folders to query")
    inventory = []
    for path in folders:
        info = view.folder_info(path)
        if global_tag is not None:
            from ..core import resolve_tag

            leaf = resolve_tag(view.tag_nodes(), "", global_tag, path)
            start_node, tag = "", global_tag
        else:
            leafs = getattr(view, "leaf_tags", None)
            leaf = leafs(path)[0] if leafs else None
            start_node, tag = path, leaf
        for ch in info.channels:
            seq = view.sequence(path, ch, leaf) if leaf else None
            if seq is None or not seq.records:
                continue
            first = seq.records[0].interval.since
            last = seq.records[-1].interval.since
            span = max(last - first, 1)
            gap = span // max(len(seq.records) - 1, 1) or 1
            inventory.append((path, ch, start_node, tag, first, last + gap))
    if not inventory:
        raise UnreachableByteTarget("store has no populated sequences")

    pool: list[CanonicalQuery] = []
    seen = set()
    attempts = 0
    while len(pool) < n_distinct:
        attempts += 1
        if attempts > n_distinct * 50:
            raise UnreachableByteTarget(
                f"cannot draw {n_distinct} distinct queries from this store"
            )
        folder, ch, start_node, tag, lo, hi = inventory[int(rng.integers(len(inventory)))]
        if rng.random() < profile.range_fraction:
            a = int(rng.integers(lo, hi))
            b = int(rng.integers(a + 1, min(hi + 1, OPEN) + 1))
            q = CanonicalQuery.range(folder, ch, start_node, tag, a, min(b, OPEN))
        else:
            t = int(rng.integers(lo, hi))
            q = CanonicalQuery.point(folder, ch, start_node, tag, t)
        key = selection_key(q)
        if key in seen:
            continue
        seen.add(key)
        pool.append(q)
    return pool


def gen_workload(
    view: ConditionsRead,
    profile: WorkloadProfile | str,
    arrival: ArrivalModel,
    n_jobs: int,
    seed: int,
) -> Trace:
    """Deterministic trace: exactly profile.n_queries events per job.

    Every pool query's expected body is computed against `view` and its
    digest frozen into the trace; replay validates responses against these.
    Raises UnreachableByteTarget when the per-job byte target cannot be met.
    """
    if isinstance(profile, str):
        profile = PROFILES[profile]
    if n_jobs < 1:
        raise ValueError("n_jobs must be >= 1")
    rng = np.random.default_rng(seed)

    n_distinct = profile.distinct_queries or profile.n_queries
    pool = _query_pool(view, profile, rng, n_distinct)
    digests = []
    sizes = np.empty(len(pool), dtype=np.int64)
    for i, q in enumerate(pool):
        body = view.read_query_bytes(q)
        digests.append(body_validator(body))
        sizes[i] = len(body)

    starts = arrival_times(arrival, n_jobs, rng)
    per_job = profile.n_queries
    if n_distinct == per_job:
        # each job touches every pool entry once, in its own order
        idx_blocks = [rng.permutation(per_job) for _ in range(n_jobs)]
    else:
        idx_blocks = [rng.integers(0, n_distinct, size=per_job) for _ in range(n_jobs)]
    query_idx = np.concatenate(idx_blocks).astype(np.int32)
    job_ids = np.repeat(np.arange(n_jobs, dtype=np.int32), per_job)
    offsets = (
        np.tile(np.arange(per_job), n_jobs) * profile.think_time_s
        if profile.think_time_s
        else np.zeros(n_jobs * per_job)
    )
    times = np.repeat(starts, per_job) + offsets

    order = np.argsort(times, kind="stable")
    trace = Trace(
        profile_name=profile.name,
        seed=seed,
        n_jobs=n_jobs,
        queries=tuple(pool),
        oracle_digests=tuple(digests),
        oracle_sizes=sizes,
        times=times[order],
        job_ids=job_ids[order],
        query_idx=query_idx[order],
        think_time_s=profile.think_time_s,
    )

    if profile.target_bytes is not None:
        per_job_bytes = trace.total_oracle_bytes / n_jobs
        target = profile.target_bytes
        if profile.target_kind == "at_least":
            if per_job_bytes < target:
                raise UnreachableByteTarget(
                    f"per-job bytes {per_job_bytes:.0f} below target {target}"
                )
        elif abs(per_job_bytes - target) > 0.10 * target:
            raise UnreachableByteTarget(
                f"per-job bytes {per_job_bytes:.0f} not within 10% of target {target}"
            )
    return trace
