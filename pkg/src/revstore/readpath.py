"""Restoring versions: pointer-chain tracing and streamed reads.

A restore runs as two stages joined by a bounded queue.  The tracing stage
walks pointer chains in logical order and emits resolved locations; the
reading stage translates them through each segment's offset map, coalesces
adjacent blocks into ranged reads and synthesizes null blocks.
"""

from __future__ import annotations

import os
import queue
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .catalog import TAG_DIRECT, TAG_INDIRECT, TAG_NULL, decode_pointer_table
from .errors import CorruptionError, DanglingReferenceError, UnknownVersionError
from .segstore import HOLE, segment_id


@dataclass(frozen=True)
class Physical:
    segment_id: str
    block_index: int
    hops: int = field(default=0, compare=False)


@dataclass(frozen=True)
class SynthesizedNull:
    hops: int = field(default=0, compare=False)


ResolvedLocation = Physical | SynthesizedNull


class VersionChain:
    """Lazily loaded recipes and pointer tables of one VM's versions."""

    def __init__(self, repo, vm_id: str):
        self.repo = repo
        self.vm_id = vm_id
        self.newest = repo.catalog.latest(vm_id)
        self._tables: dict[int, np.ndarray] = {}
        self._fps: dict[int, list[bytes]] = {}

    def check(self, version_no: int) -> None:
        if not self.repo.catalog.has_version(self.vm_id, version_no):
            raise UnknownVersionError(f"{self.vm_id} version {version_no}")

    def table(self, n: int) -> np.ndarray:
        t = self._tables.get(n)
        if t is None:
            if not self.repo.catalog.has_version(self.vm_id, n):
                raise CorruptionError(f"{self.vm_id}: pointer into missing version {n}")
            path = self.repo.catalog.table_path(self.vm_id, n)
            with open(path, "rb") as f:
                raw = f.read()
            t = self._tables[n] = decode_pointer_table(raw)
        return t

    def segment_fps(self, n: int) -> list[bytes]:
        fps = self._fps.get(n)
        if fps is None:
            fps = self._fps[n] = self.repo.catalog.load_recipe(self.vm_id, n, with_table=False).segment_fps
        return fps

    def logical_length(self, n: int) -> int:
        return self.repo.catalog.vms[self.vm_id]["versions"][n]

    def resolve(self, version_no: int, ordinals: np.ndarray):
        """Vectorized chain walk.

        Returns ``(version, segment ordinal, block index, hops)`` arrays; the
        version entry is 0 for null blocks.
        """
        ordinals = np.asarray(ordinals, dtype=np.int64)
        n = len(ordinals)
        out_v = np.zeros(n, dtype=np.int64)
        out_s = np.zeros(n, dtype=np.int64)
        out_b = np.zeros(n, dtype=np.int64)
        hops = np.zeros(n, dtype=np.int64)
        # pending work keyed by the version whose table must be consulted
        work = {version_no: (np.arange(n), ordinals)}
        limit = self.newest - version_no
        while work:
            level = min(work)
            idx, o = work.pop(level)
            t = self.table(level)
            if len(o) and (o.min() < 0 or o.max() >= len(t)):
                raise CorruptionError(f"{self.vm_id} v{level}: pointer target out of range")
            tag = t["tag"][o]
            a = t["a"][o].astype(np.int64)
            b = t["b"][o].astype(np.int64)
            d = tag == TAG_DIRECT
            out_v[idx[d]] = level
            out_s[idx[d]] = a[d]
            out_b[idx[d]] = b[d]
            ind = tag == TAG_INDIRECT
            if ((tag != TAG_NULL) & ~d & ~ind).any():
                raise CorruptionError(f"{self.vm_id} v{level}: unknown pointer tag")
            if ind.any():
                targets = a[ind]
                if (targets <= level).any() or (targets > self.newest).any():
                    raise CorruptionError(f"{self.vm_id} v{level}: indirect pointer is not forward")
                hops[idx[ind]] += 1
                if hops[idx[ind]].max() > limit:
                    raise CorruptionError(f"{self.vm_id}: pointer chain longer than the version chain")
                for tv in np.unique(targets).tolist():
                    sel = targets == tv
                    nidx, no = idx[ind][sel], b[ind][sel]
                    if tv in work:
                        pidx, po = work[tv]
                        nidx, no = np.concatenate((pidx, nidx)), np.concatenate((po, no))
                    work[tv] = (nidx, no)
        return out_v, out_s, out_b, hops


def resolve_block(repo, vm_id: str, version_no: int, ordinal: int) -> ResolvedLocation:
    """Follow one block's pointer chain, one hop at a time."""
    chain = VersionChain(repo, vm_id)
    chain.check(version_no)
    t = chain.table(version_no)
    if not 0 <= ordinal < len(t):
        raise IndexError(f"block ordinal {ordinal} out of range")
    v, o, hops = version_no, ordinal, 0
    while True:
        t = chain.table(v)
        if not 0 <= o < len(t):
            raise CorruptionError(f"{vm_id} v{v}: dangling pointer target {o}")
        tag, a, b = int(t["tag"][o]), int(t["a"][o]), int(t["b"][o])
        if tag == TAG_NULL:
            return SynthesizedNull(hops)
        if tag == TAG_DIRECT:
            return Physical(segment_id(chain.segment_fps(v)[a]), b, hops)
        if tag != TAG_INDIRECT:
            raise CorruptionError(f"{vm_id} v{v}: unknown pointer tag {tag}")
        if a <= v or a > chain.newest:
            raise CorruptionError(f"{vm_id} v{v}: indirect pointer to version {a}")
        v, o, hops = a, b, hops + 1
        if hops > chain.newest - version_no:
            raise CorruptionError(f"{vm_id}: pointer chain cycle")


@dataclass
class ReadStats:
    blocks: int = 0
    null_blocks: int = 0
    indirect_pointers: int = 0
    chain_hops_total: int = 0
    max_chain_length: int = 0
    distinct_segments: int = 0
    read_runs: int = 0
    non_contiguous_reads: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def resolve_version(repo, vm_id: str, version_no: int):
    """Resolve every block of a version.

    Returns ``(fps, block_index, hops)`` where ``fps`` is an object array of
    segment fingerprints, ``None`` for null blocks.
    """
    chain = VersionChain(repo, vm_id)
    chain.check(version_no)
    n = len(chain.table(version_no))
    v, s, b, hops = chain.resolve(version_no, np.arange(n))
    fps = np.empty(n, dtype=object)
    for ver in np.unique(v[v > 0]).tolist():
        sel = v == ver
        lst = chain.segment_fps(ver)
        fps[sel] = [lst[i] for i in s[sel].tolist()]
    return fps, b, hops


def read_stats(repo, vm_id: str, version_no: int) -> ReadStats:
    """Chain and layout statistics from pointer tables and metadata only.

    ``non_contiguous_reads`` counts places where, reading the version in
    logical order, the next non-null block is not at the physical position
    that continues the previous one.  Physical positions are
    ``placement * blocks_per_segment + slot``, where placement is the order
    in which segments were laid out by commits and compactions.
    """
    with repo.vm_lock(vm_id).read():
        chain = VersionChain(repo, vm_id)
        chain.check(version_no)
        table = chain.table(version_no)
        fps, blk, hops = resolve_version(repo, vm_id, version_no)
    live = np.array([f is not None for f in fps], dtype=bool)
    st = ReadStats(blocks=len(fps), null_blocks=int((~live).sum()))
    st.indirect_pointers = int((table["tag"] == TAG_INDIRECT).sum())
    st.chain_hops_total = int(hops.sum())
    st.max_chain_length = int(hops.max()) if len(hops) else 0
    if not live.any():
        return st
    pos = np.flatnonzero(live)
    live_fps = fps[live]
    distinct = {}
    codes = np.empty(len(live_fps), dtype=np.int64)
    for i, fp in enumerate(live_fps):
        codes[i] = distinct.setdefault(fp, len(distinct))
    st.distinct_segments = len(distinct)
    bps = repo.params.blocks_per_segment
    placement = np.empty(len(distinct), dtype=np.int64)
    slot_maps = []
    for fp, c in distinct.items():
        meta = repo.store.get_meta(fp)
        placement[c] = meta.placement
        slot_maps.append(meta.offset_map.astype(np.int64))
    slots = np.empty(len(pos), dtype=np.int64)
    blk_live = blk[live]
    for c in range(len(distinct)):
        sel = codes == c
        slots[sel] = slot_maps[c][blk_live[sel]]
    if (slots == HOLE).any():
        raise DanglingReferenceError(f"{vm_id} v{version_no} resolves to a removed block")
    addr = placement[codes] * bps + slots
    offset = addr - pos
    breaks = int((offset[1:] != offset[:-1]).sum())
    st.non_contiguous_reads = breaks
    # a ranged read never spans two segment files
    same = (codes[1:] == codes[:-1]) & (slots[1:] == slots[:-1] + 1) & (pos[1:] == pos[:-1] + 1)
    st.read_runs = int(len(pos) - same.sum())
    return st


class RestoreStream:
    """Iterable of byte chunks for one version, exactly ``logical_length`` long.

    Iteration raises on any error, so a consumer that sees the iterator
    finish normally has received the whole image.
    """

    _DONE = object()

    def __init__(self, repo, vm_id: str, version_no: int, *, depth: int = 1024,
                 prefetch: bool = True, max_open: int = 128):
        self.repo = repo
        self.vm_id = vm_id
        self.version_no = version_no
        self.depth = max(1, depth)
        self.batch = max(1, self.depth // 4)
        self.prefetch = prefetch
        self.max_open = max_open
        self.tracing_seconds = 0.0
        self.hops_total = 0
        self.null_blocks = 0
        self.bytes_read = 0
        chain = VersionChain(repo, vm_id)
        chain.check(version_no)
        self.logical_length = chain.logical_length(version_no)

    def __iter__(self):
        lock = self.repo.vm_lock(self.vm_id)
        with lock.read():
            yield from self._run()

    def _trace(self, chain: VersionChain, n: int, q: queue.Queue, stop: threading.Event) -> None:
        seen = set()
        try:
            for start in range(0, n, self.batch):
                t0 = time.perf_counter()
                ords = np.arange(start, min(n, start + self.batch))
                v, s, b, hops = chain.resolve(self.version_no, ords)
                fps = [None] * len(ords)
                for ver in np.unique(v[v > 0]).tolist():
                    lst = chain.segment_fps(ver)
                    for i in np.flatnonzero(v == ver).tolist():
                        fps[i] = lst[s[i]]
                self.tracing_seconds += time.perf_counter() - t0
                self.hops_total += int(hops.sum())
                if self.prefetch:
                    for fp in fps:
                        if fp is not None and fp not in seen:
                            seen.add(fp)
                            self.repo.store.advise_willneed(fp)
                item = (start, fps, b)
                while not stop.is_set():
                    try:
                        q.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
            q.put(self._DONE)
        except BaseException as exc:  # handed to the reading stage
            q.put(exc)

    def _run(self):
        repo = self.repo
        store = repo.store
        bs = repo.params.block_size
        chain = VersionChain(repo, self.vm_id)
        n = len(chain.table(self.version_no))
        q: queue.Queue = queue.Queue(maxsize=max(1, self.depth // self.batch))
        stop = threading.Event()
        tracer = threading.Thread(target=self._trace, args=(chain, n, q, stop), daemon=True)
        tracer.start()
        snaps: OrderedDict = OrderedDict()
        remaining = self.logical_length
        try:
            while True:
                item = q.get()
                if item is self._DONE:
                    break
                if isinstance(item, BaseException):
                    raise item
                start, fps, blk = item
                count = len(fps)
                buf = bytearray(count * bs)
                groups: dict[bytes, list[int]] = {}
                for i, fp in enumerate(fps):
                    if fp is None:
                        self.null_blocks += 1
                    else:
                        groups.setdefault(fp, []).append(i)
                for fp, idx in groups.items():
                    snap = snaps.get(fp)
                    if snap is None:
                        snap = snaps[fp] = store.snapshot(fp)
                        if len(snaps) > self.max_open:
                            os.close(snaps.popitem(last=False)[1].fd)
                    else:
                        snaps.move_to_end(fp)
                    idx = np.asarray(idx)
                    bi = blk[idx]
                    slots = snap.slots[bi].astype(np.int64)
                    if (slots == HOLE).any() or (snap.refcounts[bi] == 0).any():
                        raise DanglingReferenceError(
                            f"{self.vm_id} v{self.version_no}: block of {fp.hex()} was removed")
                    cut = np.flatnonzero((np.diff(idx) != 1) | (np.diff(slots) != 1)) + 1
                    for lo, hi in zip(np.concatenate(([0], cut)).tolist(),
                                      np.concatenate((cut, [len(idx)])).tolist()):
                        nbytes = (hi - lo) * bs
                        data = os.pread(snap.fd, nbytes, int(slots[lo]) * bs)
                        if len(data) != nbytes:
                            raise CorruptionError(f"{fp.hex()}: short read")
                        p = int(idx[lo]) * bs
                        buf[p:p + nbytes] = data
                        store.io.add(1, nbytes)
                        self.bytes_read += nbytes
                if remaining < len(buf):
                    del buf[remaining:]
                remaining -= len(buf)
                if buf:
                    yield bytes(buf)
            if remaining != 0:
                raise CorruptionError("restore produced the wrong number of bytes")
        finally:
            stop.set()
            for snap in snaps.values():
                os.close(snap.fd)
            tracer.join(timeout=5)


def restore_stream(repo, vm_id: str, version_no: int, *, depth: int = 1024, prefetch: bool = True) -> RestoreStream:
    return RestoreStream(repo, vm_id, version_no, depth=depth, prefetch=prefetch)


def restore_bytes(repo, vm_id: str, version_no: int) -> bytes:
    return b"".join(restore_stream(repo, vm_id, version_no))
