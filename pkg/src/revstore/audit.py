"""Whole-store consistency checks.

:func:`audit_refcounts` recounts Direct pointers across every committed
version and compares them with the stored reference counts.  :func:`fsck`
additionally re-reads segment data and re-derives block fingerprints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .catalog import TAG_DIRECT, TAG_INDIRECT
from .chunking import FP_LEN, fingerprint
from .errors import StoreError
from .readpath import VersionChain
from .segstore import HOLE


@dataclass
class AuditReport:
    segments: int = 0
    versions: int = 0
    blocks_checked: int = 0
    refcount_mismatches: list[str] = field(default_factory=list)
    unreachable_violations: list[str] = field(default_factory=list)
    sequentiality_violations: list[str] = field(default_factory=list)
    fingerprint_mismatches: list[str] = field(default_factory=list)
    orphans: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.refcount_mismatches or self.unreachable_violations
                    or self.sequentiality_violations or self.fingerprint_mismatches)

    def problems(self) -> list[str]:
        return (self.refcount_mismatches + self.unreachable_violations
                + self.sequentiality_violations + self.fingerprint_mismatches)

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "segments": self.segments,
            "versions": self.versions,
            "blocks_checked": self.blocks_checked,
            "problems": self.problems(),
            "orphans": self.orphans,
        }


def live_direct_counts(repo) -> dict[bytes, np.ndarray]:
    """Direct pointers per block of every segment, over all VMs and versions."""
    bps = repo.params.blocks_per_segment
    counts: dict[bytes, np.ndarray] = {}
    for vm in repo.vms():
        for n in repo.versions(vm):
            recipe = repo.catalog.load_recipe(vm, n)
            t = recipe.pointer_table
            d = t["tag"] == TAG_DIRECT
            seg = t["a"][d].astype(np.int64)
            blk = t["b"][d].astype(np.int64)
            for s in np.unique(seg).tolist():
                fp = recipe.segment_fps[s]
                c = counts.get(fp)
                if c is None:
                    c = counts[fp] = np.zeros(bps, dtype=np.int64)
                np.add.at(c, blk[seg == s], 1)
    return counts


def audit_refcounts(repo, *, limit: int = 20) -> AuditReport:
    """Refcount conservation, removed-block unreachability, latest sequentiality.

    Holds every VM's read lock, so it sees a quiescent catalog.
    """
    rep = AuditReport()
    vms = repo.vms()
    locks = [repo.vm_lock(vm).read() for vm in vms]
    for lk in locks:
        lk.__enter__()
    try:
        counts = live_direct_counts(repo)
        for fp in repo.store.fingerprints():
            rep.segments += 1
            meta = repo.store.get_meta(fp)
            expect = counts.get(fp, np.zeros(meta.block_count, dtype=np.int64))
            live = ~meta.nulls
            rep.blocks_checked += int(live.sum())
            if (expect[meta.nulls] != 0).any():
                rep.refcount_mismatches.append(f"{fp.hex()}: direct pointer to a null block")
            bad = np.flatnonzero(live & (meta.refcounts.astype(np.int64) != expect))
            if bad.size and len(rep.refcount_mismatches) < limit:
                i = int(bad[0])
                rep.refcount_mismatches.append(
                    f"{fp.hex()} block {i}: refcount {int(meta.refcounts[i])}, "
                    f"{int(expect[i])} direct pointers ({bad.size} blocks differ)")
            gone = np.flatnonzero(meta.removed & (expect > 0))
            if gone.size:
                rep.unreachable_violations.append(
                    f"{fp.hex()}: {gone.size} removed blocks are still referenced")
        for fp in counts:
            if fp not in repo.store:
                rep.refcount_mismatches.append(f"{fp.hex()}: referenced but not stored")
        for vm in vms:
            chain = VersionChain(repo, vm)
            latest = chain.newest
            for n in repo.versions(vm):
                rep.versions += 1
                t = chain.table(n)
                if n == latest and (t["tag"] == TAG_INDIRECT).any():
                    rep.sequentiality_violations.append(f"{vm} v{n}: latest version has indirect pointers")
                try:
                    v, s, b, _ = chain.resolve(n, np.arange(len(t)))
                except StoreError as exc:
                    rep.unreachable_violations.append(f"{vm} v{n}: {exc}")
                    continue
                for ver in np.unique(v[v > 0]).tolist():
                    sel = v == ver
                    fps = chain.segment_fps(ver)
                    for si in np.unique(s[sel]).tolist():
                        meta = repo.store.get_meta(fps[si])
                        bi = b[sel & (s == si)]
                        if (meta.offset_map[bi] == HOLE).any() or (meta.refcounts[bi] == 0).any():
                            rep.unreachable_violations.append(
                                f"{vm} v{n}: resolves to a removed block of {fps[si].hex()}")
    finally:
        for lk in reversed(locks):
            lk.__exit__(None, None, None)
    rep.orphans = [str(p) for p in repo.store.orphans()]
    return rep


def verify_segment_data(repo, fp: bytes) -> list[str]:
    """Re-derive fingerprints of every readable block of one segment."""
    store = repo.store
    bs = repo.params.block_size
    meta = store.get_meta(fp)
    with open(store.data_path(fp), "rb") as f:
        raw = f.read()
    problems = []
    fps = meta.block_fps
    for i in range(meta.block_count):
        if meta.nulls[i]:
            continue
        slot = int(meta.offset_map[i])
        if slot == HOLE:
            continue
        data = raw[slot * bs:(slot + 1) * bs]
        if len(data) != bs or fingerprint(data) != fps[i * FP_LEN:(i + 1) * FP_LEN]:
            problems.append(f"{fp.hex()} block {i}: content does not match its fingerprint")
            break
    if not problems and meta.complete and not meta.compacted:
        if fingerprint(raw.ljust(repo.params.segment_size, b"\0")) != fp:
            problems.append(f"{fp.hex()}: segment content does not match its fingerprint")
    return problems


def fsck(repo) -> AuditReport:
    rep = audit_refcounts(repo)
    for fp in repo.store.fingerprints():
        rep.fingerprint_mismatches.extend(verify_segment_data(repo, fp))
    return rep
