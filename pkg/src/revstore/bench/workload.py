"""Deterministic synthetic VM image workloads.

Every image is a sequence of 4 KiB blocks, each named by a 64-bit content
key; key 0 is the null block.  Equal keys mean equal content and distinct
keys mean distinct content, so the set of keys doubles as a cheap
unique-block oracle.  Bytes are produced on demand from the keys, so images
are never held in memory: a block is a page from a fixed random pool with
its key stamped into the first 8 bytes.

Shape of a workload:

* A master image with ``null_fraction`` of its blocks null, laid out as
  runs of varying length.
* Each VM owns a private data area covering ``private_fraction`` of the
  image at a per-VM offset.  Version 1 is the master with that area
  rewritten with VM-private data.
* Version k+1 rewrites byte ranges of version k.  The volume is
  ``change_fraction`` of the image, jittered log-normally per version and
  multiplied by ``spike_factor`` at ``spike_version``.  It is split over
  ``ranges_per_version`` ranges.  The ranges of one version cluster in a
  window of ``hot_region_fraction`` of the image, placed anywhere inside the
  private area.  A ``change_spread`` share of the ranges lands anywhere in
  the image instead.  Range content is fresh data, except that a
  ``zero_fraction`` share of ranges writes zeros and a ``copy_fraction``
  share copies blocks from elsewhere in the same image.

Spec files are ``key = value`` lines (``#`` comments allowed); sizes accept
``K``/``M``/``G`` suffixes.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from ..chunking import MiB, parse_size

POOL_PAGES = 4096
_VM_SHIFT = 40  # keys of VM m live in [(m + 1) << 40, (m + 2) << 40)


@dataclass(frozen=True)
class WorkloadSpec:
    seed: int = 0
    vm_count: int = 4
    versions: int = 12
    image_size: int = 512 * MiB
    block_size: int = 4096
    null_fraction: float = 0.4
    null_run_blocks: int = 256  # mean length of a null run
    change_fraction: float = 0.01
    change_jitter: float = 0.3  # sigma of the log-normal volume jitter
    ranges_per_version: int = 16
    change_spread: float = 0.0
    hot_region_fraction: float = 0.1
    private_fraction: float = 0.3
    private_start: float | None = None  # fraction of the image; None = per-VM random
    spike_version: int = 4
    spike_factor: float = 1.0
    zero_fraction: float = 0.05
    copy_fraction: float = 0.05

    def __post_init__(self):
        if self.vm_count < 1 or self.versions < 1:
            raise ValueError("vm_count and versions must be positive")
        if self.image_size <= 0 or self.image_size % self.block_size:
            raise ValueError("image_size must be a positive multiple of block_size")
        if self.block_size % 8:
            raise ValueError("block_size must be a multiple of 8")
        for name in ("null_fraction", "change_spread", "hot_region_fraction",
                     "private_fraction", "zero_fraction", "copy_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be within [0, 1]")
        if not 0.0 < self.hot_region_fraction <= self.private_fraction:
            raise ValueError("hot_region_fraction must be positive and fit in the private area")
        if self.zero_fraction + self.copy_fraction > 1.0:
            raise ValueError("zero_fraction + copy_fraction must not exceed 1")
        if self.change_fraction < 0 or self.ranges_per_version < 1:
            raise ValueError("change_fraction must be >= 0 and ranges_per_version >= 1")

    @property
    def block_count(self) -> int:
        return self.image_size // self.block_size

    def with_(self, **kw) -> "WorkloadSpec":
        return replace(self, **kw)


def parse_spec_text(text: str) -> WorkloadSpec:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    cp.read_string("[spec]\n" + text)
    types = {f.name: f.type for f in fields(WorkloadSpec)}
    kw = {}
    for key, raw in cp["spec"].items():
        if key not in types:
            raise ValueError(f"unknown workload key {key!r}")
        t = str(types[key])
        if key in ("image_size", "block_size"):
            kw[key] = parse_size(raw)
        elif key == "private_start":
            kw[key] = None if raw.strip().lower() in ("", "none", "random") else float(raw)
        elif t.startswith("int"):
            kw[key] = int(raw)
        else:
            kw[key] = float(raw)
    return WorkloadSpec(**kw)


def load_spec(path) -> WorkloadSpec:
    return parse_spec_text(Path(path).read_text())


def spec_to_text(spec: WorkloadSpec) -> str:
    return "".join(f"{f.name} = {getattr(spec, f.name)}\n" for f in fields(spec))


# -- content ------------------------------------------------------------


class ContentPool:
    """Maps content keys to block bytes."""

    def __init__(self, seed: int, block_size: int):
        rng = np.random.Generator(np.random.PCG64([seed, 0x5EED]))
        self.block_size = block_size
        self.pages = rng.integers(0, 256, size=(POOL_PAGES, block_size), dtype=np.uint8)
        self.pages[:, 0] |= 1  # never all zero, even before stamping

    def render(self, keys: np.ndarray) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.uint64)
        sel = ((keys * np.uint64(0x9E3779B97F4A7C15)) >> np.uint64(52)) % np.uint64(POOL_PAGES)
        out = self.pages[sel.astype(np.int64)]
        out[:, :8] = keys.view(np.uint8).reshape(-1, 8)
        out[keys == 0] = 0
        return out


class VersionImage:
    """One generated image; exposes ``size`` and ``pread`` like an image file."""

    def __init__(self, keys: np.ndarray, pool: ContentPool, vm: int = 0, version: int = 0):
        self.keys = keys
        self.pool = pool
        self.vm = vm
        self.version = version
        self.block_size = pool.block_size
        self.size = len(keys) * self.block_size

    def pread(self, offset: int, length: int) -> bytes:
        bs = self.block_size
        end = min(self.size, offset + length)
        if offset >= end:
            return b""
        first, last = offset // bs, (end - 1) // bs + 1
        buf = self.pool.render(self.keys[first:last]).tobytes()
        lo = offset - first * bs
        return buf[lo:lo + (end - offset)]

    def iter_chunks(self, chunk: int = 16 * MiB):
        for off in range(0, self.size, chunk):
            yield self.pread(off, chunk)

    def tobytes(self) -> bytes:
        return self.pool.render(self.keys).tobytes()


# -- generation -----------------------------------------------------------


def master_keys(spec: WorkloadSpec) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64([spec.seed, 1]))
    n = spec.block_count
    keys = np.arange(1, n + 1, dtype=np.uint64)
    if spec.null_fraction > 0:
        target = int(round(spec.null_fraction * n))
        nulls = np.zeros(n, dtype=bool)
        mean = max(1, min(spec.null_run_blocks, n))
        while nulls.sum() < target:
            length = int(min(n, max(1, rng.geometric(1.0 / mean))))
            start = int(rng.integers(0, n - length + 1))
            nulls[start:start + length] = True
        # trim overshoot from the tail of the last null run
        extra = int(nulls.sum()) - target
        if extra > 0:
            idx = np.flatnonzero(nulls)[-extra:]
            nulls[idx] = False
        keys[nulls] = 0
    return keys


class VmHistory:
    """Key arrays of one VM's versions, generated in order."""

    def __init__(self, spec: WorkloadSpec, vm: int, master: np.ndarray):
        self.spec = spec
        self.vm = vm
        self.rng = np.random.Generator(np.random.PCG64([spec.seed, 2, vm]))
        self.next_key = (vm + 1) << _VM_SHIFT
        n = spec.block_count
        size = max(1, int(round(spec.private_fraction * n)))
        if spec.private_start is None:
            start = int(self.rng.integers(0, n - size + 1))
        else:
            start = min(n - size, int(spec.private_start * n))
        self.private = (start, start + size)
        self.window = max(1, min(size, int(round(spec.hot_region_fraction * n))))
        keys = master.copy()
        area = keys[start:start + size]
        live = area != 0  # the private area keeps the master's null layout
        area[live] = self._fresh(int(live.sum()))
        self.version = 1
        self.keys = keys

    def _fresh(self, count: int) -> np.ndarray:
        out = np.arange(self.next_key, self.next_key + count, dtype=np.uint64)
        self.next_key += count
        return out

    def change_volume(self, version: int) -> int:
        spec = self.spec
        jitter = float(self.rng.lognormal(0.0, spec.change_jitter)) if spec.change_jitter else 1.0
        factor = spec.spike_factor if version == spec.spike_version else 1.0
        return int(round(spec.change_fraction * spec.block_count * jitter * factor))

    def advance(self) -> np.ndarray:
        """Derive the next version from the current one."""
        spec = self.spec
        rng = self.rng
        n = spec.block_count
        self.version += 1
        volume = min(n, self.change_volume(self.version))
        keys = self.keys.copy()
        if volume > 0:
            r = spec.ranges_per_version
            shares = rng.dirichlet(np.ones(r))
            lengths = np.maximum(1, np.round(shares * volume).astype(np.int64))
            p0, p1 = self.private
            h0 = int(rng.integers(p0, p1 - self.window + 1))
            h1 = h0 + self.window
            for length in lengths.tolist():
                if rng.random() < spec.change_spread:
                    lo, hi = 0, n
                else:
                    lo, hi = h0, h1
                length = min(length, hi - lo)
                start = int(rng.integers(lo, hi - length + 1))
                kind = rng.random()
                if kind < spec.zero_fraction:
                    keys[start:start + length] = 0
                elif kind < spec.zero_fraction + spec.copy_fraction:
                    src = int(rng.integers(0, n - length + 1))
                    keys[start:start + length] = self.keys[src:src + length]
                else:
                    keys[start:start + length] = self._fresh(length)
        self.keys = keys
        return keys


class Workload:
    """All versions of all VMs, produced week by week."""

    def __init__(self, spec: WorkloadSpec):
        self.spec = spec
        self.pool = ContentPool(spec.seed, spec.block_size)
        self.master = master_keys(spec)

    def weeks(self):
        """Yield ``(version, [VersionImage per VM])`` in version order."""
        vms = [VmHistory(self.spec, m, self.master) for m in range(self.spec.vm_count)]
        for v in range(1, self.spec.versions + 1):
            if v > 1:
                for h in vms:
                    h.advance()
            yield v, [VersionImage(h.keys, self.pool, h.vm, v) for h in vms]

    def images(self):
        """Yield ``(vm, version, VersionImage)`` for every image, week-major."""
        for v, imgs in self.weeks():
            for img in imgs:
                yield img.vm, v, img

    def key_history(self) -> dict[int, list[np.ndarray]]:
        out: dict[int, list[np.ndarray]] = {}
        for vm, _, img in self.images():
            out.setdefault(vm, []).append(img.keys)
        return out


def generate_workload(spec: WorkloadSpec):
    """Stream every image of the workload as ``(vm, version, image)``."""
    return Workload(spec).images()


def vm_name(vm: int) -> str:
    return f"vm{vm:02d}"


# -- oracles --------------------------------------------------------------


@dataclass
class Oracle:
    total_bytes: int
    non_null_bytes: int
    unique_blocks: int
    block_size: int

    @property
    def unique_bytes(self) -> int:
        return self.unique_blocks * self.block_size

    @property
    def dedup_ratio(self) -> float:
        """Best possible saving: every distinct non-null block stored once."""
        return 1.0 - self.unique_bytes / self.non_null_bytes if self.non_null_bytes else 0.0


def oracle_from_keys(spec: WorkloadSpec) -> Oracle:
    seen = set()
    total = non_null = 0
    bs = spec.block_size
    for _, _, img in generate_workload(spec):
        k = img.keys
        nz = k[k != 0]
        total += img.size
        non_null += len(nz) * bs
        seen.update(np.unique(nz).tolist())
    return Oracle(total, non_null, len(seen), bs)


def oracle_from_bytes(spec: WorkloadSpec, block_size: int = 4096) -> Oracle:
    """Brute force: SHA-1 of every non-null block of every generated image."""
    seen = set()
    total = non_null = 0
    sha1 = hashlib.sha1
    zero = bytes(block_size)
    for _, _, img in generate_workload(spec):
        total += img.size
        for chunk in img.iter_chunks():
            mv = memoryview(chunk)
            for off in range(0, len(chunk), block_size):
                blk = mv[off:off + block_size]
                if blk == zero:
                    continue
                non_null += len(blk)
                seen.add(sha1(blk).digest())
    return Oracle(total, non_null, len(seen), block_size)


def segment_oracle(spec: WorkloadSpec, segment_size: int) -> tuple[int, int]:
    """Global segment dedup from keys: ``(stored non-null bytes, total non-null bytes)``."""
    bs = spec.block_size
    bps = segment_size // bs
    stored = {}
    non_null = 0
    for _, _, img in generate_workload(spec):
        k = img.keys
        pad = (-len(k)) % bps
        if pad:
            k = np.concatenate((k, np.zeros(pad, dtype=np.uint64)))
        segs = k.reshape(-1, bps)
        nn = (segs != 0).sum(axis=1)
        non_null += int(nn.sum())
        for row, c in zip(segs, nn.tolist()):
            stored.setdefault(row.tobytes(), c)
    return sum(stored.values()) * bs, non_null * bs
