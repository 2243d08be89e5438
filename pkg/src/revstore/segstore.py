"""Segment data files, per-segment metadata and the in-memory segment index.

Layout under ``<root>/segments``::

    ab/cd/<40-hex fingerprint>        segment data (sparse; null blocks are holes)
    ab/cd/<40-hex fingerprint>.meta   metadata, see META FORMAT below

A segment is *published* once its ``.meta`` file exists.  Data is made
durable and renamed into place before the metadata is written, so a crash
between the two leaves a data file without metadata; such orphans are
ignored when the store is reopened and reported by :meth:`orphans`.

META FORMAT (little endian)::

    header, 32 bytes:
        magic           4s   b"RVSM"
        format_version  u16  1
        removal_applied u8
        compacted       u8
        block_size      u32
        block_count     u32
        placement       u64  layout sequence number, 0 = not yet placed
        reserved        8x
    block_count records, 29 bytes each:
        null            u8
        fingerprint     20s  zero bytes for null blocks
        refcount        u32
        slot            u32  physical block slot in the data file,
                             0xFFFFFFFF once the block has been removed
"""

from __future__ import annotations

import ctypes
import errno
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .chunking import FP_LEN, ChunkParams, block_table, fingerprint
from .errors import (
    AtMostOnceError,
    CorruptionError,
    DanglingReferenceError,
    IntegrityError,
    RefcountError,
)

log = logging.getLogger(__name__)

META_MAGIC = b"RVSM"
META_VERSION = 1
META_HEADER = struct.Struct("<4sHBBIIQ8x")
RECORD_DTYPE = np.dtype([("null", "u1"), ("fp", "V20"), ("refcount", "<u4"), ("slot", "<u4")])
HOLE = 0xFFFFFFFF
REFCOUNT_MAX = 0xFFFFFFFF

PUNCH = "punch"
COMPACT = "compact"
COMPACT_FALLBACK = "compact-fallback"

_FALLOC_FL_KEEP_SIZE = 0x01
_FALLOC_FL_PUNCH_HOLE = 0x02


def _load_fallocate():
    try:
        fn = ctypes.CDLL(None, use_errno=True).fallocate
    except (AttributeError, OSError):
        return None
    fn.argtypes = [ctypes.c_int, ctypes.c_int, ctypes.c_int64, ctypes.c_int64]
    fn.restype = ctypes.c_int
    return fn


_fallocate = _load_fallocate()


def punch_hole(fd: int, offset: int, length: int) -> None:
    """Deallocate a file region in place, keeping the file size."""
    if _fallocate is None:
        raise OSError(errno.EOPNOTSUPP, "fallocate is not available")
    mode = _FALLOC_FL_PUNCH_HOLE | _FALLOC_FL_KEEP_SIZE
    if _fallocate(fd, mode, offset, length) != 0:
        err = ctypes.get_errno()
        raise OSError(err, os.strerror(err))


def runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """``[start, stop)`` ranges of consecutive True values."""
    m = np.concatenate(([False], np.asarray(mask, dtype=bool), [False]))
    edges = np.flatnonzero(m[1:] != m[:-1])
    return list(zip(edges[0::2].tolist(), edges[1::2].tolist()))


def segment_id(fp: bytes) -> str:
    return fp.hex()


def fp_from_id(sid: str) -> bytes:
    fp = bytes.fromhex(sid)
    if len(fp) != FP_LEN:
        raise ValueError(f"not a segment id: {sid!r}")
    return fp


@dataclass
class SegmentMeta:
    fingerprint: bytes
    block_size: int
    records: np.ndarray
    removal_applied: bool = False
    compacted: bool = False
    placement: int = 0

    @classmethod
    def fresh(cls, fp: bytes, block_size: int, nulls: np.ndarray, fps: bytes) -> "SegmentMeta":
        n = len(nulls)
        rec = np.zeros(n, dtype=RECORD_DTYPE)
        rec["null"] = nulls
        rec["fp"] = np.frombuffer(fps, dtype="V20")
        rec["slot"] = np.arange(n, dtype=np.uint32)
        return cls(fp, block_size, rec)

    @property
    def block_count(self) -> int:
        return len(self.records)

    @property
    def nulls(self) -> np.ndarray:
        return self.records["null"].astype(bool)

    @property
    def refcounts(self) -> np.ndarray:
        return self.records["refcount"]

    @property
    def offset_map(self) -> np.ndarray:
        return self.records["slot"]

    @property
    def block_fps(self) -> bytes:
        return self.records["fp"].tobytes()

    def block_fp(self, i: int) -> bytes | None:
        if self.records["null"][i]:
            return None
        return self.records["fp"][i].tobytes()

    @property
    def non_null_count(self) -> int:
        return int(self.block_count - self.records["null"].sum())

    @property
    def removed(self) -> np.ndarray:
        return (self.records["slot"] == HOLE) & ~self.nulls

    @property
    def complete(self) -> bool:
        return not self.removed.any()

    def to_bytes(self) -> bytes:
        header = META_HEADER.pack(
            META_MAGIC, META_VERSION, int(self.removal_applied), int(self.compacted),
            self.block_size, self.block_count, self.placement,
        )
        return header + self.records.tobytes()

    @classmethod
    def from_bytes(cls, fp: bytes, raw: bytes) -> "SegmentMeta":
        if len(raw) < META_HEADER.size:
            raise CorruptionError(f"{fp.hex()}: truncated metadata")
        magic, version, applied, compacted, bs, count, placement = META_HEADER.unpack_from(raw)
        if magic != META_MAGIC or version != META_VERSION:
            raise CorruptionError(f"{fp.hex()}: bad metadata header")
        body = raw[META_HEADER.size:]
        if len(body) != count * RECORD_DTYPE.itemsize:
            raise CorruptionError(f"{fp.hex()}: metadata length mismatch")
        rec = np.frombuffer(body, dtype=RECORD_DTYPE).copy()
        return cls(fp, bs, rec, bool(applied), bool(compacted), placement)


@dataclass(frozen=True)
class SegmentIndexEntry:
    fingerprint: bytes
    segment_id: str
    logical_block_count: int


@dataclass
class RemovalReport:
    segment_id: str
    mechanism: str
    blocks_removed: int
    non_null_blocks: int
    seconds: float = 0.0
    # sizes in bytes of the regions released by this removal
    freed_extents: list[int] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.blocks_removed / self.non_null_blocks if self.non_null_blocks else 0.0


class PutResult(NamedTuple):
    segment_id: str
    created: bool
    revived: bool = False


class SegmentSnapshot(NamedTuple):
    """Open data file plus the offset map that matches it."""
    fd: int
    slots: np.ndarray
    nulls: np.ndarray
    refcounts: np.ndarray


@dataclass
class IOCounters:
    read_calls: int = 0
    bytes_read: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def add(self, calls: int, nbytes: int) -> None:
        with self.lock:
            self.read_calls += calls
            self.bytes_read += nbytes


class SegmentStore:
    def __init__(self, root, params: ChunkParams, *, durable: bool = True,
                 punch_supported: bool | None = None):
        self.root = Path(root)
        self.params = params
        self.durable = durable
        self.dir = self.root / "segments"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.punch_supported = (_fallocate is not None) if punch_supported is None else punch_supported
        self.io = IOCounters()
        self.removal_log: list[RemovalReport] = []
        self._index: dict[bytes, SegmentIndexEntry] = {}
        self._meta: dict[bytes, SegmentMeta] = {}
        self._locks: dict[bytes, threading.RLock] = {}
        self._guard = threading.Lock()
        self._orphans: list[Path] = []
        self._load_index()

    # -- index ---------------------------------------------------------

    def _load_index(self) -> None:
        datas = set()
        for sub in self.dir.glob("*/*"):
            for entry in os.scandir(sub):
                name = entry.name
                if name.endswith(".meta"):
                    fp = fp_from_id(name[:-5])
                    with open(entry.path, "rb") as f:
                        hdr = f.read(META_HEADER.size)
                    count = META_HEADER.unpack(hdr)[5]
                    self._index[fp] = SegmentIndexEntry(fp, name[:-5], count)
                elif ".tmp" in name:
                    self._orphans.append(Path(entry.path))
                else:
                    datas.add(name)
        for name in sorted(datas):
            if fp_from_id(name) not in self._index:
                self._orphans.append(self._data_path(fp_from_id(name)))

    def orphans(self) -> list[Path]:
        return list(self._orphans)

    def __contains__(self, fp: bytes) -> bool:
        return fp in self._index

    def __len__(self) -> int:
        return len(self._index)

    def fingerprints(self) -> list[bytes]:
        return list(self._index)

    def entry(self, fp: bytes) -> SegmentIndexEntry:
        return self._index[fp]

    def query_exists(self, fps) -> list[bool]:
        index = self._index
        return [fp in index for fp in fps]

    # -- paths and locks -----------------------------------------------

    def _data_path(self, fp: bytes) -> Path:
        h = fp.hex()
        return self.dir / h[:2] / h[2:4] / h

    def _meta_path(self, fp: bytes) -> Path:
        p = self._data_path(fp)
        return p.with_name(p.name + ".meta")

    def data_path(self, fp: bytes) -> Path:
        return self._data_path(fp)

    def meta_path(self, fp: bytes) -> Path:
        return self._meta_path(fp)

    def lock(self, fp: bytes) -> threading.RLock:
        with self._guard:
            lk = self._locks.get(fp)
            if lk is None:
                lk = self._locks[fp] = threading.RLock()
            return lk

    # -- metadata ------------------------------------------------------

    def get_meta(self, fp: bytes) -> SegmentMeta:
        meta = self._meta.get(fp)
        if meta is None:
            if fp not in self._index:
                raise KeyError(fp.hex())
            with self.lock(fp):
                meta = self._meta.get(fp)
                if meta is None:
                    meta = SegmentMeta.from_bytes(fp, self._meta_path(fp).read_bytes())
                    self._meta[fp] = meta
        return meta

    def _write_meta(self, meta: SegmentMeta, *, replace: bool) -> None:
        path = self._meta_path(meta.fingerprint)
        raw = meta.to_bytes()
        if replace:
            tmp = path.with_name(path.name + ".tmp")
            self._write_file(tmp, raw)
            os.replace(tmp, path)
        else:
            fd = os.open(path, os.O_WRONLY)
            try:
                os.pwrite(fd, raw, 0)
                if self.durable:
                    os.fdatasync(fd)
            finally:
                os.close(fd)

    def _write_file(self, path: Path, raw: bytes) -> None:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            os.write(fd, raw)
            if self.durable:
                os.fsync(fd)
        finally:
            os.close(fd)

    def _sync_dir(self, path: Path) -> None:
        if not self.durable:
            return
        fd = os.open(path, os.O_RDONLY)
        try:
            os.fsync(fd)
        finally:
            os.close(fd)

    def set_placement(self, fp: bytes, placement: int) -> None:
        with self.lock(fp):
            meta = self.get_meta(fp)
            meta.placement = placement
            self._write_meta(meta, replace=False)

    # -- writes --------------------------------------------------------

    def put_segment(self, fp: bytes, data, blocks: tuple[np.ndarray, bytes] | None = None) -> PutResult:
        """Store a segment; a no-op when ``fp`` is already stored and complete.

        ``blocks`` is the ``(null_mask, fingerprints)`` table for ``data``;
        it is computed when omitted.  A stored segment that lost blocks to
        removal is rewritten in full ("revived") so it can be referenced
        again.
        """
        if len(data) != self.params.segment_size:
            raise ValueError(f"segment must be {self.params.segment_size} bytes, got {len(data)}")
        with self.lock(fp):
            existing = fp in self._index
            if existing and self.get_meta(fp).complete:
                return PutResult(segment_id(fp), False)
            if fingerprint(data) != fp:
                raise IntegrityError(f"content does not hash to {fp.hex()}")
            nulls, fps = blocks if blocks is not None else block_table(data, self.params.block_size)
            if existing:
                self._revive(fp, data, nulls)
                return PutResult(segment_id(fp), False, True)
            path = self._data_path(fp)
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(path.name + ".tmp")
            self._write_sparse(tmp, data, np.asarray(nulls, dtype=bool), self.params.segment_size)
            os.replace(tmp, path)
            meta = SegmentMeta.fresh(fp, self.params.block_size, nulls, fps)
            self._publish(meta)
            self._index[fp] = SegmentIndexEntry(fp, segment_id(fp), meta.block_count)
            self._meta[fp] = meta
            return PutResult(segment_id(fp), True)

    def _publish(self, meta: SegmentMeta) -> None:
        path = self._meta_path(meta.fingerprint)
        self._write_meta(meta, replace=True)
        self._sync_dir(path.parent)

    def _write_sparse(self, path: Path, data, nulls: np.ndarray, size: int, slots=None) -> None:
        """Write the non-null blocks of ``data``; nulls stay unallocated."""
        bs = self.params.block_size
        mv = memoryview(data)
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
        try:
            for start, stop in runs(~nulls):
                os.pwrite(fd, mv[start * bs:stop * bs], start * bs)
            os.ftruncate(fd, size)
            if self.durable:
                os.fsync(fd)
        finally:
            os.close(fd)

    def _revive(self, fp: bytes, data, nulls) -> None:
        meta = self.get_meta(fp)
        path = self._data_path(fp)
        tmp = path.with_name(path.name + ".tmp")
        self._write_sparse(tmp, data, np.asarray(nulls, dtype=bool), self.params.segment_size)
        os.replace(tmp, path)
        meta.records["slot"] = np.arange(meta.block_count, dtype=np.uint32)
        meta.compacted = False
        self._write_meta(meta, replace=True)
        log.info("revived segment %s", fp.hex())

    def adjust_refcounts(self, fp: bytes, deltas) -> SegmentMeta:
        """Apply signed per-block deltas (array or ``{index: delta}``)."""
        with self.lock(fp):
            meta = self.get_meta(fp)
            if isinstance(deltas, dict):
                d = np.zeros(meta.block_count, dtype=np.int64)
                for i, v in deltas.items():
                    d[i] += v
            else:
                d = np.asarray(deltas, dtype=np.int64)
                if d.shape != (meta.block_count,):
                    raise ValueError("delta array length does not match block count")
            if (d[meta.nulls] != 0).any():
                raise RefcountError(f"{fp.hex()}: null blocks never hold references")
            new = meta.records["refcount"].astype(np.int64) + d
            if (new < 0).any():
                bad = int(np.flatnonzero(new < 0)[0])
                raise RefcountError(f"{fp.hex()}: refcount underflow at block {bad}")
            if (new > REFCOUNT_MAX).any():
                raise RefcountError(f"{fp.hex()}: refcount overflow")
            meta.records["refcount"] = new.astype(np.uint32)
            self._write_meta(meta, replace=False)
            return meta

    # -- reads ---------------------------------------------------------

    def snapshot(self, fp: bytes) -> SegmentSnapshot:
        """Open the data file together with a consistent copy of its map."""
        with self.lock(fp):
            meta = self.get_meta(fp)
            fd = os.open(self._data_path(fp), os.O_RDONLY)
            return SegmentSnapshot(fd, meta.records["slot"].copy(), meta.nulls,
                                   meta.records["refcount"].copy())

    def read_blocks(self, sid, block_indices) -> list[bytes]:
        fp = fp_from_id(sid) if isinstance(sid, str) else sid
        bs = self.params.block_size
        snap = self.snapshot(fp)
        try:
            out = []
            for i in block_indices:
                if snap.nulls[i]:
                    out.append(bytes(bs))
                    continue
                if snap.refcounts[i] == 0 or snap.slots[i] == HOLE:
                    raise DanglingReferenceError(f"{fp.hex()} block {i} has been removed")
                buf = os.pread(snap.fd, bs, int(snap.slots[i]) * bs)
                self.io.add(1, len(buf))
                if len(buf) != bs:
                    raise CorruptionError(f"{fp.hex()} block {i}: short read")
                out.append(buf)
            return out
        finally:
            os.close(snap.fd)

    def advise_willneed(self, fp: bytes) -> None:
        """Best-effort read-ahead hint for a whole segment file."""
        if not hasattr(os, "posix_fadvise"):
            return
        try:
            fd = os.open(self._data_path(fp), os.O_RDONLY)
        except OSError:
            return
        try:
            os.posix_fadvise(fd, 0, 0, os.POSIX_FADV_WILLNEED)
        except OSError:
            pass
        finally:
            os.close(fd)

    def allocated_bytes(self, fp: bytes) -> int:
        return os.stat(self._data_path(fp)).st_blocks * 512

    # -- removal -------------------------------------------------------

    def remove_blocks(self, sid, victims, rebuild_threshold: float) -> RemovalReport:
        fp = fp_from_id(sid) if isinstance(sid, str) else sid
        with self.lock(fp):
            meta = self.get_meta(fp)
            if meta.removal_applied:
                raise AtMostOnceError(f"{fp.hex()}: blocks were already removed once")
            victims = np.unique(np.asarray(victims, dtype=np.int64))
            if victims.size == 0:
                raise ValueError("no victims given")
            if victims[0] < 0 or victims[-1] >= meta.block_count:
                raise IndexError("victim index out of range")
            if meta.records["null"][victims].any():
                raise ValueError("null blocks cannot be removed")
            if (meta.records["refcount"][victims] != 0).any():
                raise RefcountError(f"{fp.hex()}: victims must have refcount 0")
            non_null = meta.non_null_count
            t0 = time.perf_counter()
            if victims.size / non_null < rebuild_threshold:
                if self.punch_supported:
                    try:
                        freed = self._punch(fp, meta, victims)
                        mechanism = PUNCH
                    except OSError as exc:
                        if exc.errno not in (errno.EOPNOTSUPP, errno.ENOSYS, errno.EINVAL):
                            raise
                        log.warning("hole punching unsupported (%s); compacting", exc)
                        self.punch_supported = False
                        freed = self._compact(fp, meta, victims)
                        mechanism = COMPACT_FALLBACK
                else:
                    freed = self._compact(fp, meta, victims)
                    mechanism = COMPACT_FALLBACK
            else:
                freed = self._compact(fp, meta, victims)
                mechanism = COMPACT
            meta.removal_applied = True
            self._write_meta(meta, replace=True)
            report = RemovalReport(segment_id(fp), mechanism, int(victims.size), non_null,
                                   time.perf_counter() - t0, freed)
            with self._guard:
                self.removal_log.append(report)
            self._append_removal_log(report)
            return report

    def _punch(self, fp: bytes, meta: SegmentMeta, victims: np.ndarray) -> list[int]:
        bs = self.params.block_size
        mask = np.zeros(meta.block_count, dtype=bool)
        mask[victims] = True
        freed = []
        fd = os.open(self._data_path(fp), os.O_RDWR)
        try:
            for start, stop in runs(mask):
                punch_hole(fd, start * bs, (stop - start) * bs)
                freed.append((stop - start) * bs)
            if self.durable:
                os.fsync(fd)
        finally:
            os.close(fd)
        meta.records["slot"][victims] = HOLE
        return freed

    def _compact(self, fp: bytes, meta: SegmentMeta, victims: np.ndarray) -> list[int]:
        bs = self.params.block_size
        path = self._data_path(fp)
        keep = np.ones(meta.block_count, dtype=bool)
        keep[victims] = False
        old_alloc = os.stat(path).st_blocks * 512
        with open(path, "rb") as f:
            old = f.read()
        self.io.add(1, len(old))
        slots = meta.records["slot"]
        # gather survivors in logical order; they get consecutive ranks
        survivors = np.flatnonzero(keep)
        packed = bytearray(len(survivors) * bs)
        for rank, i in enumerate(survivors.tolist()):
            if not meta.records["null"][i]:
                src = int(slots[i]) * bs
                packed[rank * bs:(rank + 1) * bs] = old[src:src + bs]
        tmp = path.with_name(path.name + ".tmp")
        self._write_sparse(tmp, packed, meta.nulls[survivors], len(packed))
        os.replace(tmp, path)
        new_slots = np.full(meta.block_count, HOLE, dtype=np.uint32)
        new_slots[survivors] = np.arange(len(survivors), dtype=np.uint32)
        meta.records["slot"] = new_slots
        meta.compacted = True
        return [old_alloc]

    def _append_removal_log(self, r: RemovalReport) -> None:
        line = f"{r.segment_id} {r.mechanism} {r.blocks_removed} {r.non_null_blocks}\n"
        with self._guard, open(self.root / "removals.log", "a") as f:
            f.write(line)

    def removal_history(self) -> list[tuple[str, str, int, int]]:
        """Every removal ever applied to this store, read from disk."""
        path = self.root / "removals.log"
        if not path.exists():
            return []
        out = []
        for line in path.read_text().splitlines():
            sid, mech, n, nn = line.split()
            out.append((sid, mech, int(n), int(nn)))
        return out
