"""Measurement harness: backup, read and rebuild-threshold experiments.

Every run drives the real client against a server (in-process HTTP by
default, or the repository directly with ``transport="local"``), restores
and verifies every stored version, and only then reports numbers.

Hardware-independent proxies are reported next to wall-clock figures:
chain hops, distinct segments touched, non-contiguous reads and a
free-extent proxy.  The latter is modelled from offset maps: the gaps that
removals leave inside segment files, i.e. runs of punched blocks.
Compaction leaves no gap inside the file.  Every such gap is smaller than a
segment, so the proxy is the total gap size over the stored data size.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path


from ..chunking import MiB, ChunkParams, fingerprint, parse_size, format_size
from ..client import HttpTransport, LocalTransport, backup, plan_backup, server_params
from ..dedup import Repository
from ..readpath import RestoreStream, read_stats
from ..segstore import COMPACT, COMPACT_FALLBACK, HOLE, PUNCH, runs
from ..server import ServerConfig, make_server
from .workload import Workload, WorkloadSpec, oracle_from_keys, spec_to_text, vm_name

log = logging.getLogger(__name__)

GLOBAL_SIZES = (4 * MiB, 8 * MiB, 16 * MiB, 32 * MiB)


class BenchFailure(RuntimeError):
    """A restored version differed from what was backed up."""


@dataclass(frozen=True)
class BenchMode:
    name: str
    segment_size: int
    reverse_dedup: bool

    @property
    def label(self) -> str:
        return f"{self.name}-{format_size(self.segment_size)}"


def parse_mode(text: str) -> BenchMode:
    """``revdedup``, ``revdedup:8M``, ``conventional`` or ``conventional:64K``."""
    name, _, size = text.partition(":")
    if name == "revdedup":
        return BenchMode(name, parse_size(size) if size else 4 * MiB, True)
    if name == "conventional":
        return BenchMode(name, parse_size(size) if size else 128 * 1024, False)
    raise ValueError(f"unknown bench mode {text!r}")


@dataclass
class VersionRecord:
    vm: str
    version: int
    logical_length: int
    non_null_bytes: int
    segments_total: int
    segments_uploaded: int
    bytes_uploaded: int
    bytes_sent: int
    fingerprint_s: float
    upload_s: float
    submit_s: float
    blocks_redirected: int
    victims_removed: int
    victims_held: int
    punches: int
    compactions: int
    removal_s: float


@dataclass
class ReadRecord:
    vm: str
    version: int
    seconds: float
    mb_per_s: float
    blocks: int
    null_blocks: int
    indirect_pointers: int
    chain_hops_total: int
    max_chain_length: int
    distinct_segments: int
    read_runs: int
    non_contiguous_reads: int
    tracing_s: float = float("nan")


@dataclass
class RemovalEvent:
    vm: str
    version: int
    segment_id: str
    mechanism: str
    blocks_removed: int
    non_null_blocks: int
    seconds: float

    @property
    def ratio(self) -> float:
        return self.blocks_removed / self.non_null_blocks


@dataclass
class StorageUsage:
    data_bytes: int = 0
    metadata_bytes: int = 0
    segments: int = 0

    @property
    def consumed_bytes(self) -> int:
        return self.data_bytes + self.metadata_bytes


@dataclass
class FreeExtentProxy:
    small_free_bytes: int
    stored_data_bytes: int
    histogram: dict[str, int]  # power-of-two size class (bytes) -> extents

    @property
    def ratio(self) -> float:
        return self.small_free_bytes / self.stored_data_bytes if self.stored_data_bytes else 0.0


@dataclass
class BenchReport:
    mode: str
    segment_size: int
    reverse_dedup: bool
    spec: dict
    total_bytes: int = 0
    non_null_bytes: int = 0
    oracle_unique_bytes: int = 0
    oracle_ratio: float = 0.0
    data_bytes: int = 0
    metadata_bytes: int = 0
    consumed_bytes: int = 0
    dedup_ratio: float = 0.0
    global_only_ratio: dict[int, float] = field(default_factory=dict)
    bytes_uploaded: int = 0
    bytes_sent: int = 0
    backup_seconds: float = 0.0
    backup_mb_per_s: float = 0.0
    restore_seconds: float = 0.0
    restore_mb_per_s: float = 0.0
    punches: int = 0
    compactions: int = 0
    fallbacks: int = 0
    removal_seconds: float = 0.0
    victims_held: int = 0
    free_extent_ratio: float = 0.0
    verified_versions: int = 0
    versions: list[VersionRecord] = field(default_factory=list)
    reads: list[ReadRecord] = field(default_factory=list)
    removals: list[RemovalEvent] = field(default_factory=list)

    def summary(self) -> dict:
        skip = {"versions", "reads", "removals"}
        d = {k: v for k, v in asdict(self).items() if k not in skip}
        d["global_only_ratio"] = {format_size(k): v for k, v in self.global_only_ratio.items()}
        return d

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = self.mode
        with open(out / f"{stem}.jsonl", "w") as f:
            f.write(json.dumps({"type": "summary", **self.summary()}) + "\n")
            for rec, kind in ((self.versions, "version"), (self.reads, "read"), (self.removals, "removal")):
                for r in rec:
                    f.write(json.dumps({"type": kind, **asdict(r)}) + "\n")
        _write_csv(out / f"{stem}-versions.csv", self.versions)
        _write_csv(out / f"{stem}-reads.csv", self.reads)
        return out / f"{stem}.jsonl"


def _write_csv(path: Path, rows) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(asdict(rows[0])))
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))


# -- measurements ---------------------------------------------------------


def storage_usage(root) -> StorageUsage:
    """Allocated bytes under a store root, split into data and metadata."""
    root = Path(root)
    u = StorageUsage()
    for dirpath, _, files in os.walk(root):
        for name in files:
            st = os.stat(os.path.join(dirpath, name))
            alloc = st.st_blocks * 512
            is_data = (Path(dirpath).parent.parent.name == "segments"
                       and len(name) == 40 and "." not in name)
            if is_data:
                u.data_bytes += alloc
                u.segments += 1
            else:
                u.metadata_bytes += alloc
    return u


def free_extent_proxy(repo) -> FreeExtentProxy:
    bs = repo.params.block_size
    hist: dict[str, int] = {}
    small = 0
    stored = 0
    for fp in repo.store.fingerprints():
        meta = repo.store.get_meta(fp)
        live = ~meta.nulls & (meta.offset_map != HOLE)
        stored += int(live.sum()) * bs
        if meta.compacted or not meta.removal_applied:
            continue
        # punched in place: removed blocks are holes at their own index
        for start, stop in runs(meta.removed):
            size = (stop - start) * bs
            if size < repo.params.segment_size:
                small += size
            cls = str(1 << (size - 1).bit_length())
            hist[cls] = hist.get(cls, 0) + 1
    return FreeExtentProxy(small, stored, dict(sorted(hist.items(), key=lambda kv: int(kv[0]))))


def global_only_ratios(records: dict, sizes=GLOBAL_SIZES, base: int = 4 * MiB) -> dict[int, float]:
    """Saving of segment-only dedup at several segment sizes.

    ``records`` maps ``(vm, version)`` to the ``(fps, non_null_blocks)`` of
    the image's segments at size ``base``.  Larger sizes group ``k``
    consecutive base segments; two groups are equal iff all members are.
    """
    out = {}
    for size in sizes:
        if size % base:
            continue
        k = size // base
        stored = {}
        total = 0
        for fps, nn in records.values():
            n = len(fps)
            for i in range(0, n, k):
                key = tuple(fps[i:i + k])
                c = int(sum(nn[i:i + k]))
                total += c
                stored.setdefault(key, c)
        out[size] = 1.0 - sum(stored.values()) / total if total else 0.0
    return out


# -- drivers --------------------------------------------------------------


class BenchTarget:
    """A store plus the transport the client uses to reach it."""

    def __init__(self, root, params: ChunkParams, *, reverse_dedup: bool, threshold: float,
                 transport: str, durable: bool):
        self.repo = Repository(root, params, rebuild_threshold=threshold,
                               reverse_dedup=reverse_dedup, durable=durable)
        self.server = None
        if transport == "http":
            cfg = ServerConfig(store_root=str(root), listen_address="127.0.0.1:0",
                               segment_size=params.segment_size, block_size=params.block_size,
                               rebuild_threshold=threshold, reverse_dedup=reverse_dedup,
                               durable=durable)
            self.server = make_server(cfg, self.repo)
            self.server.start_background()
            self.transport = HttpTransport(self.server.url)
        elif transport == "local":
            self.transport = LocalTransport(self.repo)
        else:
            raise ValueError(f"unknown transport {transport!r}")

    def close(self) -> None:
        if self.server is not None:
            self.server.stop()


class _Turnstile:
    """Lets threads pass one at a time in a fixed order."""

    def __init__(self):
        self.cond = threading.Condition()
        self.turn = 0

    def wait(self, ticket: int) -> None:
        with self.cond:
            while self.turn != ticket:
                self.cond.wait()

    def advance(self) -> None:
        with self.cond:
            self.turn += 1
            self.cond.notify_all()


def ingest_workload(spec: WorkloadSpec, target: BenchTarget, params: ChunkParams, *, clients: int,
                     expected: dict, base_fps: dict, on_week=None, on_ingest=None) -> tuple[list, list]:
    """Back up every image; submits happen in (week, vm) order.

    ``on_ingest(vm, week)`` runs right after each submit, before the next
    one starts; ``on_week(week)`` after all VMs of a week are in.
    """
    versions: list[VersionRecord] = []
    events: list[RemovalEvent] = []
    workload = Workload(spec)
    transport = target.transport
    base = ChunkParams(4 * MiB, spec.block_size) if spec.image_size % (4 * MiB) == 0 else None
    for week, images in workload.weeks():
        gate = _Turnstile()
        results: list = [None] * len(images)

        def one(i, img):
            vm = vm_name(img.vm)
            t0 = time.perf_counter()
            plan = plan_backup(img, params, workers=1)
            t_fp = time.perf_counter() - t0
            expected[(vm, week)] = plan.segment_fps
            if base is not None:
                if base == params:
                    bp = plan
                else:
                    bp = plan_backup(img, base, workers=1)
                base_fps[(vm, week)] = (bp.segment_fps,
                                        [int((~s.nulls).sum()) for s in bp.segments])
            nn = int((img.keys != 0).sum()) * spec.block_size
            gate.wait(i)
            try:
                summary = backup(img, vm, transport, plan=plan, parallel=4, version_no=week)
                if on_ingest is not None:
                    on_ingest(vm, week)
            finally:
                gate.advance()
            results[i] = (summary, t_fp, nn)

        with ThreadPoolExecutor(max(1, min(clients, len(images)))) as pool:
            futs = [pool.submit(one, i, img) for i, img in enumerate(images)]
            for f in futs:
                f.result()
        for summary, t_fp, nn in results:
            rep = summary.report
            rem = rep.get("removals", [])
            for r in rem:
                events.append(RemovalEvent(summary.vm_id, week, r["segment"], r["mechanism"],
                                           r["blocks_removed"], r["non_null_blocks"],
                                           r.get("seconds", 0.0)))
            versions.append(VersionRecord(
                vm=summary.vm_id, version=week, logical_length=summary.logical_length,
                non_null_bytes=nn, segments_total=summary.segments_total,
                segments_uploaded=summary.segments_uploaded, bytes_uploaded=summary.bytes_uploaded,
                bytes_sent=summary.bytes_sent, fingerprint_s=t_fp,
                upload_s=summary.seconds["upload"], submit_s=summary.seconds["submit"],
                blocks_redirected=rep["blocks_redirected"], victims_removed=rep["victims_removed"],
                victims_held=rep["victims_held"],
                punches=sum(1 for r in rem if r["mechanism"] == PUNCH),
                compactions=sum(1 for r in rem if r["mechanism"] != PUNCH),
                removal_s=rep["seconds"].get("removal", 0.0),
            ))
        if on_week is not None:
            on_week(week)
    return versions, events


def _segment_fps_of(buf, segment_size: int) -> list[bytes]:
    mv = memoryview(buf)
    out = []
    for off in range(0, len(buf), segment_size):
        seg = mv[off:off + segment_size]
        if len(seg) < segment_size:
            seg = bytes(seg) + bytes(segment_size - len(seg))
        out.append(fingerprint(seg))
    return out


def run_read_bench(target_or_repo, expected: dict | None = None, *, order: str = "after-all",
                   transport=None) -> list[ReadRecord]:
    """Restore every version, verify it and collect read metrics.

    ``order`` is ``after-all`` (oldest version first) or ``latest-first``
    (newest first).  ``expected`` maps ``(vm, version)`` to the segment
    fingerprints recorded at backup time; a mismatch raises
    :class:`BenchFailure`.
    """
    if isinstance(target_or_repo, BenchTarget):
        repo, transport = target_or_repo.repo, target_or_repo.transport
    else:
        repo = target_or_repo
        transport = transport or LocalTransport(repo)
    if order not in ("after-all", "latest-first"):
        raise ValueError(f"unknown read order {order!r}")
    ss = repo.params.segment_size
    out = []
    for vm in repo.vms():
        vers = repo.versions(vm)
        if order == "latest-first":
            vers = vers[::-1]
        for n in vers:
            st = read_stats(repo, vm, n)
            length = repo.catalog.vms[vm]["versions"][n]
            sink = _Sink(length)
            tracing = float("nan")
            t0 = time.perf_counter()
            if isinstance(transport, LocalTransport):
                stream = RestoreStream(repo, vm, n)
                for chunk in stream:
                    sink.write(chunk)
                tracing = stream.tracing_seconds
            else:
                transport.restore(vm, n, sink)
            dt = time.perf_counter() - t0
            if sink.pos != length:
                raise BenchFailure(f"{vm} v{n}: restored {sink.pos} of {length} bytes")
            if expected is not None:
                want = expected.get((vm, n))
                if want is not None and _segment_fps_of(sink.buf, ss) != want:
                    raise BenchFailure(f"{vm} v{n}: restored image differs from the backup")
            out.append(ReadRecord(vm, n, dt, length / MiB / dt if dt > 0 else float("inf"),
                                  st.blocks, st.null_blocks, st.indirect_pointers,
                                  st.chain_hops_total, st.max_chain_length, st.distinct_segments,
                                  st.read_runs, st.non_contiguous_reads, tracing))
    return out


class _Sink:
    def __init__(self, size: int):
        self.buf = bytearray(size)
        self.pos = 0

    def write(self, chunk) -> None:
        n = len(chunk)
        if self.pos + n > len(self.buf):
            raise BenchFailure("restore returned more bytes than the image length")
        self.buf[self.pos:self.pos + n] = chunk
        self.pos += n


def run_backup_bench(spec: WorkloadSpec, mode: BenchMode | str, *, root=None, clients: int = 8,
                     transport: str = "http", threshold: float = 0.2, durable: bool = False,
                     read_order: str = "after-all", with_oracle: bool = True,
                     keep_store: bool = False) -> BenchReport:
    """Back up the whole workload in ``mode``, verify every version, report."""
    if isinstance(mode, str):
        mode = parse_mode(mode)
    params = ChunkParams(mode.segment_size, spec.block_size)
    tmp = None
    if root is None:
        tmp = tempfile.mkdtemp(prefix=f"revstore-bench-{mode.name}-")
        root = tmp
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        raise ValueError(f"bench store {root} is not empty")
    target = BenchTarget(root, params, reverse_dedup=mode.reverse_dedup, threshold=threshold,
                     transport=transport, durable=durable)
    report = BenchReport(mode.label, mode.segment_size, mode.reverse_dedup, asdict(spec))
    try:
        if server_params(target.transport) != params:
            raise BenchFailure("server chunk parameters differ from the bench mode")
        expected: dict = {}
        base_fps: dict = {}
        t0 = time.perf_counter()
        report.versions, report.removals = ingest_workload(
            spec, target, params, clients=clients, expected=expected, base_fps=base_fps)
        report.backup_seconds = time.perf_counter() - t0
        t1 = time.perf_counter()
        report.reads = run_read_bench(target, expected, order=read_order)
        report.restore_seconds = time.perf_counter() - t1
        report.verified_versions = len(report.reads)
        _fill_summary(report, target.repo, spec, base_fps, with_oracle)
    finally:
        target.close()
        if tmp is not None and not keep_store:
            shutil.rmtree(tmp, ignore_errors=True)
    return report


def _fill_summary(report: BenchReport, repo, spec: WorkloadSpec, base_fps: dict, with_oracle: bool) -> None:
    vs = report.versions
    report.total_bytes = sum(v.logical_length for v in vs)
    report.non_null_bytes = sum(v.non_null_bytes for v in vs)
    report.bytes_uploaded = sum(v.bytes_uploaded for v in vs)
    report.bytes_sent = sum(v.bytes_sent for v in vs)
    busy = sum(v.upload_s + v.submit_s for v in vs)
    report.backup_mb_per_s = report.total_bytes / MiB / busy if busy else 0.0
    rs = sum(r.seconds for r in report.reads)
    report.restore_mb_per_s = sum(v.logical_length for v in vs) / MiB / rs if rs else 0.0
    usage = storage_usage(repo.root)
    report.data_bytes = usage.data_bytes
    report.metadata_bytes = usage.metadata_bytes
    report.consumed_bytes = usage.consumed_bytes
    report.dedup_ratio = 1.0 - usage.consumed_bytes / report.non_null_bytes if report.non_null_bytes else 0.0
    report.global_only_ratio = global_only_ratios(base_fps) if base_fps else {}
    report.punches = sum(1 for e in report.removals if e.mechanism == PUNCH)
    report.compactions = sum(1 for e in report.removals if e.mechanism == COMPACT)
    report.fallbacks = sum(1 for e in report.removals if e.mechanism == COMPACT_FALLBACK)
    report.removal_seconds = sum(v.removal_s for v in vs)
    report.victims_held = sum(v.victims_held for v in vs)
    report.free_extent_ratio = free_extent_proxy(repo).ratio
    if with_oracle:
        o = oracle_from_keys(spec)
        report.oracle_unique_bytes = o.unique_bytes
        report.oracle_ratio = o.dedup_ratio


@dataclass
class SweepPoint:
    threshold: float
    removal_seconds: float
    punches: int
    compactions: int
    fallbacks: int
    segments_with_victims: int
    rule_violations: int
    small_free_bytes: int
    stored_data_bytes: int
    free_extent_ratio: float
    free_extent_histogram: dict
    events: list[RemovalEvent] = field(default_factory=list, repr=False)


def rule_violations(events, threshold: float, punch_supported: bool = True) -> int:
    """Removals whose mechanism disagrees with ``ratio < threshold``."""
    bad = 0
    for e in events:
        want_punch = e.ratio < threshold
        if want_punch:
            ok = e.mechanism == PUNCH or (e.mechanism == COMPACT_FALLBACK and not punch_supported)
        else:
            ok = e.mechanism == COMPACT
        bad += not ok
    return bad


def run_threshold_sweep(spec: WorkloadSpec, thresholds, *, segment_size: int = 4 * MiB,
                        root=None, transport: str = "local", clients: int = 1) -> list[SweepPoint]:
    """Replay the workload on a clean store for each rebuild threshold."""
    params = ChunkParams(segment_size, spec.block_size)
    out = []
    base = Path(root) if root is not None else Path(tempfile.mkdtemp(prefix="revstore-sweep-"))
    try:
        for t in thresholds:
            d = base / f"t{t:.2f}"
            if d.exists():
                shutil.rmtree(d)
            target = BenchTarget(d, params, reverse_dedup=True, threshold=float(t),
                             transport=transport, durable=False)
            try:
                versions, events = ingest_workload(spec, target, params, clients=clients,
                                                    expected={}, base_fps={})
                fe = free_extent_proxy(target.repo)
                punch_ok = target.repo.store.punch_supported
            finally:
                target.close()
            out.append(SweepPoint(
                threshold=float(t),
                removal_seconds=sum(v.removal_s for v in versions),
                punches=sum(1 for e in events if e.mechanism == PUNCH),
                compactions=sum(1 for e in events if e.mechanism == COMPACT),
                fallbacks=sum(1 for e in events if e.mechanism == COMPACT_FALLBACK),
                segments_with_victims=len(events),
                rule_violations=rule_violations(events, float(t), punch_ok),
                small_free_bytes=fe.small_free_bytes,
                stored_data_bytes=fe.stored_data_bytes,
                free_extent_ratio=fe.ratio,
                free_extent_histogram=fe.histogram,
                events=events,
            ))
            shutil.rmtree(d, ignore_errors=True)
    finally:
        if root is None:
            shutil.rmtree(base, ignore_errors=True)
    return out


def write_sweep(points: list[SweepPoint], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for p in points:
        d = asdict(p)
        d.pop("events")
        rows.append(d)
    with open(out / "sweep.jsonl", "w") as f:
        for d in rows:
            f.write(json.dumps({"type": "sweep", **d}) + "\n")
    with open(out / "sweep.csv", "w", newline="") as f:
        cols = [k for k in rows[0] if k != "free_extent_histogram"] if rows else []
        w = csv.DictWriter(f, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return out / "sweep.jsonl"


def write_spec(spec: WorkloadSpec, out_dir) -> None:
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "spec.txt").write_text(spec_to_text(spec))


__all__ = [
    "BenchFailure", "BenchMode", "BenchReport", "BenchTarget", "FreeExtentProxy", "ReadRecord", "RemovalEvent",
    "SweepPoint", "VersionRecord", "free_extent_proxy", "global_only_ratios", "ingest_workload", "parse_mode",
    "rule_violations", "run_backup_bench", "run_read_bench", "run_threshold_sweep",
    "storage_usage", "write_spec", "write_sweep",
]
