"""Version ingest: segment linking, reverse deduplication and block removal.

When version ``n`` of a VM is ingested, every non-null block of every
segment it lists gains one reference.  Version ``n-1`` is then compared with
``n``: each block of ``n-1`` that also exists in ``n`` is redirected to it
(an Indirect pointer) and drops its reference.  Blocks left with no
references are removed from their segment, by hole punching or compaction
depending on the rebuild threshold, at most once per segment.

Segments present in both versions are not loaded into the block index; their
blocks are identical by construction and are redirected positionally to the
first occurrence of the same segment in the new version.
"""

from __future__ import annotations

import json
import logging
import math
import os
import threading
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import (
    PTR_DTYPE,
    TAG_DIRECT,
    TAG_INDIRECT,
    TAG_NULL,
    Catalog,
    VersionRecipe,
    check_vm_id,
)
from .chunking import FP_LEN, ChunkParams
from .errors import (
    CorruptionError,
    IncompleteSegmentsError,
    IntegrityError,
    MissingSegmentsError,
    VersionOrderError,
)
from .segstore import COMPACT, COMPACT_FALLBACK, HOLE, RemovalReport, SegmentStore, segment_id

log = logging.getLogger(__name__)


class RWLock:
    """Many readers or one writer; waiting writers block new readers."""

    def __init__(self):
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._waiting = 0

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer or self._waiting:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            self._waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._waiting -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


@dataclass
class BlockIndex:
    """Fingerprint -> [(version_no, block ordinal)] for two adjacent versions."""

    prev_version: int
    curr_version: int
    entries: dict[bytes, list[tuple[int, int]]] = field(default_factory=dict)

    @classmethod
    def build(cls, prev: VersionRecipe, curr: VersionRecipe, get_meta, bps: int) -> "BlockIndex":
        shared = set(prev.segment_fps) & set(curr.segment_fps)
        index = cls(prev.version_no, curr.version_no)
        for recipe in (prev, curr):
            for s, fp in enumerate(recipe.segment_fps):
                if fp not in shared:
                    index._add_segment(recipe, s, get_meta(fp), bps)
        return index

    def _add_segment(self, recipe: VersionRecipe, s: int, meta, bps: int) -> None:
        table = recipe.pointer_table
        base = s * bps
        fps = meta.block_fps
        live = table["tag"][base:base + bps] != TAG_NULL
        entries = self.entries
        v = recipe.version_no
        for b in np.flatnonzero(live).tolist():
            key = fps[b * FP_LEN:(b + 1) * FP_LEN]
            lst = entries.get(key)
            if lst is None:
                entries[key] = [(v, base + b)]
            else:
                lst.append((v, base + b))

    def __len__(self) -> int:
        return len(self.entries)


def match_blocks(index: BlockIndex) -> list[tuple[int, int]]:
    """``(prev ordinal, curr ordinal)`` pairs; ties go to the lowest curr ordinal."""
    out = []
    pv, cv = index.prev_version, index.curr_version
    for hits in index.entries.values():
        target = min((o for v, o in hits if v == cv), default=None)
        if target is None:
            continue
        out.extend((o, target) for v, o in hits if v == pv)
    out.sort()
    return out


@dataclass
class ReverseDedupResult:
    victims: list[tuple[str, np.ndarray]]
    redirected: int = 0
    index_seconds: float = 0.0
    search_seconds: float = 0.0


def reverse_deduplicate(prev: VersionRecipe, curr: VersionRecipe, store: SegmentStore) -> ReverseDedupResult:
    """Redirect duplicate blocks of ``prev`` to ``curr`` and drop their references.

    ``prev.pointer_table`` is replaced by the updated table.  Returns the
    blocks whose reference count reached zero, grouped by segment.
    """
    if curr.version_no != prev.version_no + 1:
        raise ValueError("reverse deduplication only compares adjacent versions")
    bps = store.params.blocks_per_segment
    t0 = time.perf_counter()
    index = BlockIndex.build(prev, curr, store.get_meta, bps)
    t1 = time.perf_counter()

    old = prev.pointer_table
    new = old.copy()
    src = []  # prev ordinals being redirected
    dst = []  # matching curr ordinals

    first_in_curr = {}
    for s, fp in enumerate(curr.segment_fps):
        first_in_curr.setdefault(fp, s)
    for s, fp in enumerate(prev.segment_fps):
        c = first_in_curr.get(fp)
        if c is None:
            continue
        live = np.flatnonzero(old["tag"][s * bps:(s + 1) * bps] != TAG_NULL)
        src.append(s * bps + live)
        dst.append(c * bps + live)
    pairs = match_blocks(index)
    if pairs:
        p = np.array(pairs, dtype=np.int64)
        src.append(p[:, 0])
        dst.append(p[:, 1])

    victims = []
    redirected = 0
    if src:
        src_o = np.concatenate(src)
        dst_o = np.concatenate(dst)
        if (old["tag"][src_o] != TAG_DIRECT).any():
            raise CorruptionError(f"{prev.vm_id} v{prev.version_no}: previous version is not all-direct")
        seg_ord = old["a"][src_o]
        blk = old["b"][src_o]
        new["tag"][src_o] = TAG_INDIRECT
        new["a"][src_o] = curr.version_no
        new["b"][src_o] = dst_o
        redirected = len(src_o)
        decrements: dict[bytes, np.ndarray] = {}
        for s in np.unique(seg_ord).tolist():
            fp = prev.segment_fps[s]
            d = decrements.get(fp)
            if d is None:
                d = decrements[fp] = np.zeros(bps, dtype=np.int64)
            np.add.at(d, blk[seg_ord == s].astype(np.int64), 1)
        for fp, d in decrements.items():
            meta = store.adjust_refcounts(fp, -d)
            zero = (meta.refcounts == 0) & ~meta.nulls & (meta.offset_map != HOLE) & (d > 0)
            if zero.any():
                victims.append((segment_id(fp), np.flatnonzero(zero)))
    prev.pointer_table = new
    return ReverseDedupResult(victims, redirected, t1 - t0, time.perf_counter() - t1)


@dataclass
class IngestReport:
    vm_id: str
    version_no: int
    segments_total: int = 0
    segments_new: int = 0
    segments_linked: int = 0
    blocks_redirected: int = 0
    victims_removed: int = 0
    victims_held: int = 0
    removals: list[RemovalReport] = field(default_factory=list)
    seconds: dict[str, float] = field(default_factory=dict)

    @property
    def mechanisms(self) -> dict[str, int]:
        return dict(Counter(r.mechanism for r in self.removals))

    def to_dict(self) -> dict:
        return {
            "vm_id": self.vm_id,
            "version_no": self.version_no,
            "segments_total": self.segments_total,
            "segments_new": self.segments_new,
            "segments_linked": self.segments_linked,
            "blocks_redirected": self.blocks_redirected,
            "victims_removed": self.victims_removed,
            "victims_held": self.victims_held,
            "mechanisms": self.mechanisms,
            "removals": [
                {"segment": r.segment_id, "mechanism": r.mechanism,
                 "blocks_removed": r.blocks_removed, "non_null_blocks": r.non_null_blocks,
                 "seconds": r.seconds}
                for r in self.removals
            ],
            "seconds": self.seconds,
        }


class Repository:
    """A store root: segment store, catalog and the ingest engine."""

    def __init__(self, root, params: ChunkParams | None = None, *, rebuild_threshold: float = 0.2,
                 reverse_dedup: bool = True, durable: bool = True, punch_supported: bool | None = None):
        self.root = Path(root)
        if params is None:
            params = stored_params(self.root) or ChunkParams()
        if not 0.0 <= rebuild_threshold <= 1.0:
            raise ValueError("rebuild_threshold must be within [0, 1]")
        self.params = params
        self.rebuild_threshold = rebuild_threshold
        self.reverse_dedup = reverse_dedup
        self.durable = durable
        self.catalog = Catalog(self.root, params, durable=durable)
        self.store = SegmentStore(self.root, params, durable=durable, punch_supported=punch_supported)
        self._vm_locks: dict[str, RWLock] = {}
        self._guard = threading.Lock()

    def vm_lock(self, vm_id: str) -> RWLock:
        with self._guard:
            lk = self._vm_locks.get(vm_id)
            if lk is None:
                lk = self._vm_locks[vm_id] = RWLock()
            return lk

    def query_exists(self, fps):
        return self.store.query_exists(fps)

    def put_segment(self, fp, data, blocks=None):
        return self.store.put_segment(fp, data, blocks)

    def ingest_version(self, vm_id: str, version_no: int | None, logical_length: int,
                       segment_fps: list[bytes], block_tables: dict | None = None) -> IngestReport:
        """Commit a version whose segments are already stored.

        ``version_no`` of ``None`` means "the next one".  ``block_tables``
        optionally maps segment fingerprints to the client's
        ``(null_mask, fingerprints)`` tables, which must match the store.
        """
        check_vm_id(vm_id)
        params = self.params
        bps = params.blocks_per_segment
        if logical_length <= 0 or math.ceil(logical_length / params.segment_size) != len(segment_fps):
            raise ValueError("logical_length does not match the number of segments")
        with self.vm_lock(vm_id).write():
            latest = self.catalog.latest(vm_id)
            if version_no is None:
                version_no = latest + 1
            if version_no != latest + 1:
                raise VersionOrderError(f"{vm_id}: expected version {latest + 1}, got {version_no}")
            distinct = list(dict.fromkeys(segment_fps))
            missing = [fp for fp in distinct if fp not in self.store]
            if missing:
                raise MissingSegmentsError(missing)
            metas = {fp: self.store.get_meta(fp) for fp in distinct}
            incomplete = [fp for fp, m in metas.items() if not m.complete]
            if incomplete:
                raise IncompleteSegmentsError(incomplete)
            if block_tables:
                for fp, (nulls, fps) in block_tables.items():
                    m = metas.get(fp)
                    if m is None:
                        continue
                    if not np.array_equal(np.asarray(nulls, dtype=bool), m.nulls) or fps != m.block_fps:
                        raise IntegrityError(f"block descriptors for {fp.hex()} do not match the store")

            report = IngestReport(vm_id, version_no, segments_total=len(segment_fps))
            t0 = time.perf_counter()
            table = np.zeros(len(segment_fps) * bps, dtype=PTR_DTYPE)
            ar = np.arange(bps, dtype=np.uint64)
            for s, fp in enumerate(segment_fps):
                nulls = metas[fp].nulls
                sl = slice(s * bps, (s + 1) * bps)
                table["tag"][sl] = np.where(nulls, TAG_NULL, TAG_DIRECT)
                table["a"][sl] = np.where(nulls, 0, s)
                table["b"][sl] = np.where(nulls, 0, ar)
            curr = VersionRecipe(vm_id, version_no, logical_length, list(segment_fps), table)
            self.catalog.write_version_files(curr)

            for fp, k in Counter(segment_fps).items():
                meta = metas[fp]
                if meta.non_null_count == 0:
                    continue
                if meta.refcounts.any():
                    report.segments_linked += 1
                else:
                    report.segments_new += 1
                self.store.adjust_refcounts(fp, np.where(meta.nulls, 0, k))
            t1 = time.perf_counter()
            report.seconds["link"] = t1 - t0

            victims = []
            if self.reverse_dedup and latest:
                prev = self.catalog.load_recipe(vm_id, latest)
                rd = reverse_deduplicate(prev, curr, self.store)
                self.catalog.write_table(vm_id, latest, prev.pointer_table)
                report.blocks_redirected = rd.redirected
                report.seconds["index"] = rd.index_seconds
                report.seconds["search"] = rd.search_seconds
                victims = rd.victims

            for fp in distinct:
                if metas[fp].placement == 0:
                    self.store.set_placement(fp, self.catalog.next_placement())
            self.catalog.commit(vm_id, version_no, logical_length)

            t2 = time.perf_counter()
            for sid, blocks in victims:
                fp = bytes.fromhex(sid)
                if self.store.get_meta(fp).removal_applied:
                    report.victims_held += len(blocks)
                    continue
                r = self.store.remove_blocks(fp, blocks, self.rebuild_threshold)
                if r.mechanism in (COMPACT, COMPACT_FALLBACK):
                    self.store.set_placement(fp, self.catalog.next_placement())
                report.removals.append(r)
                report.victims_removed += r.blocks_removed
            if report.removals:
                self.catalog.save()
            if self.durable:
                os.sync()
            report.seconds["removal"] = time.perf_counter() - t2
            log.info("ingested %s v%d: %d redirected, %d removed", vm_id, version_no,
                     report.blocks_redirected, report.victims_removed)
            return report

    # -- convenience accessors ------------------------------------------

    def versions(self, vm_id: str) -> list[int]:
        return self.catalog.versions(vm_id)

    def vms(self) -> list[str]:
        return sorted(self.catalog.vms)

    def load_recipe(self, vm_id: str, version_no: int) -> VersionRecipe:
        return self.catalog.load_recipe(vm_id, version_no)


def stored_params(root) -> ChunkParams | None:
    path = Path(root) / "catalog.json"
    if not path.exists():
        return None
    d = json.loads(path.read_text())
    return ChunkParams(d["segment_size"], d["block_size"])
