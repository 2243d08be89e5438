from __future__ import annotations

import numpy as np
import pytest
from conftest import blocks_from_letters, check_store, ingest, make_repo

from revstore.catalog import NULL, Direct, Indirect, pointer_at
from revstore.chunking import ChunkParams, fingerprint
from revstore.dedup import BlockIndex, match_blocks
from revstore.errors import IncompleteSegmentsError, IntegrityError, MissingSegmentsError, VersionOrderError
from revstore.readpath import Physical, SynthesizedNull, resolve_block
from revstore.segstore import COMPACT, segment_id

BS = 512
WHOLE = ChunkParams(8 * BS, BS)  # one segment per 8-block image
QUARTER = ChunkParams(4 * BS, BS)  # 4-block segments

# D' = d, F' = f, E' = e, F'' = x, H' = h
VM1, VM2, VM3 = "ABCDEFGH", "ABCdEfGH", "ABCdexGh"


def table(repo, vm, n):
    t = repo.load_recipe(vm, n).pointer_table
    return [pointer_at(t, i) for i in range(len(t))]


def I(v, o):  # noqa: E743
    return Indirect(v, o)


def D(s, b):
    return Direct(s, b)


def test_three_version_chain(tmp_path):
    repo = make_repo(tmp_path, WHOLE)
    images = {}
    for n, letters in enumerate((VM1, VM2, VM3), 1):
        data = blocks_from_letters(letters, BS)
        ingest(repo, "vm", data)
        images[("vm", n)] = data
        check_store(repo, images)
    assert table(repo, "vm", 1) == [I(2, 0), I(2, 1), I(2, 2), D(0, 3), I(2, 4), D(0, 5), I(2, 6), I(2, 7)]
    assert table(repo, "vm", 2) == [I(3, 0), I(3, 1), I(3, 2), I(3, 3), D(0, 4), D(0, 5), I(3, 6), D(0, 7)]
    assert table(repo, "vm", 3) == [D(0, i) for i in range(8)]
    # A of version 1 -> version 2 -> version 3
    loc = resolve_block(repo, "vm", 1, 0)
    assert loc.hops == 2
    assert loc == Physical(segment_id(fingerprint(blocks_from_letters(VM3, BS))), 0)
    assert resolve_block(repo, "vm", 1, 3).hops == 0
    assert resolve_block(repo, "vm", 2, 4).hops == 0


def test_after_second_version_first_keeps_only_unmatched(tmp_path):
    repo = make_repo(tmp_path, WHOLE)
    ingest(repo, "vm", blocks_from_letters(VM1, BS))
    ingest(repo, "vm", blocks_from_letters(VM2, BS))
    t1 = table(repo, "vm", 1)
    assert [i for i, p in enumerate(t1) if isinstance(p, Direct)] == [3, 5]
    assert all(isinstance(p, Direct) for p in table(repo, "vm", 2))


def four_ingests(repo):
    images = {}
    for vm, letters in (("vma", VM1), ("vmb", VM1), ("vma", VM2), ("vmb", VM3)):
        data = blocks_from_letters(letters, BS)
        rep = ingest(repo, vm, data)
        images[(vm, max(repo.versions(vm)))] = data
        check_store(repo, images)
    return rep


def test_shared_segment_refcounts(tmp_path):
    """Two VMs share their first version; each then changes different blocks."""
    repo = make_repo(tmp_path, QUARTER, rebuild_threshold=0.2)
    last = four_ingests(repo)
    abcd = repo.store.get_meta(fingerprint(blocks_from_letters("ABCD", BS)))
    efgh = repo.store.get_meta(fingerprint(blocks_from_letters("EFGH", BS)))
    # A, B, C of both first versions were redirected to ABCd; D is still
    # referenced by both first versions.  In EFGH only G was redirected by
    # both VMs; E, H by vma only; F by neither.
    assert abcd.refcounts.tolist() == [0, 0, 0, 2]
    assert efgh.refcounts.tolist() == [1, 2, 0, 1]
    removed = {r["segment"]: r for r in last["removals"]}
    assert removed[segment_id(abcd.fingerprint)]["blocks_removed"] == 3
    assert removed[segment_id(abcd.fingerprint)]["mechanism"] == COMPACT
    assert removed[segment_id(efgh.fingerprint)]["blocks_removed"] == 1
    assert abcd.removed.tolist() == [True, True, True, False]


def test_identical_version_is_all_indirect(tmp_path):
    repo = make_repo(tmp_path, QUARTER)
    data = blocks_from_letters("AB.DEFGH", BS)
    ingest(repo, "vm", data)
    rep = ingest(repo, "vm", data)
    assert rep["victims_removed"] == 0
    t = table(repo, "vm", 1)
    assert t[2] is NULL
    assert [p for p in t if p is not NULL] == [I(2, o) for o in (0, 1, 3, 4, 5, 6, 7)]
    seg = repo.store.get_meta(fingerprint(blocks_from_letters("AB.D", BS)))
    assert seg.refcounts.tolist() == [1, 1, 0, 1]
    check_store(repo, {("vm", 1): data, ("vm", 2): data})


def test_match_goes_to_first_occurrence(tmp_path):
    repo = make_repo(tmp_path, QUARTER)
    ingest(repo, "vm", blocks_from_letters("ABCDEFGH", BS))
    # A appears three times in the new version; B twice
    ingest(repo, "vm", blocks_from_letters("XAYAZBAB", BS))
    t = table(repo, "vm", 1)
    assert t[0] == I(2, 1) and t[1] == I(2, 5)
    check_store(repo, {("vm", 1): blocks_from_letters("ABCDEFGH", BS),
                       ("vm", 2): blocks_from_letters("XAYAZBAB", BS)})


def test_block_index_skips_shared_segments(tmp_path):
    repo = make_repo(tmp_path, QUARTER)
    ingest(repo, "vm", blocks_from_letters("ABCDEFGH", BS))
    ingest(repo, "vm", blocks_from_letters("ABCDEFGX", BS))
    # rebuild the index the way ingest saw it
    prev = repo.load_recipe("vm", 1)
    curr = repo.load_recipe("vm", 2)
    prev.pointer_table = curr.pointer_table.copy()
    prev.version_no = 1
    idx = BlockIndex.build(prev, curr, repo.store.get_meta, 4)
    # only EFGH and EFGX are indexed: E, F, G shared plus H and X
    assert len(idx) == 5
    assert len(match_blocks(idx)) == 3


def test_segment_repeated_within_version(tmp_path):
    repo = make_repo(tmp_path, QUARTER)
    d1 = blocks_from_letters("ABCDABCD", BS)
    ingest(repo, "vm", d1)
    seg = fingerprint(blocks_from_letters("ABCD", BS))
    assert repo.store.get_meta(seg).refcounts.tolist() == [2, 2, 2, 2]
    d2 = blocks_from_letters("ABCDEEEE", BS)
    ingest(repo, "vm", d2)
    assert repo.store.get_meta(seg).refcounts.tolist() == [1, 1, 1, 1]
    check_store(repo, {("vm", 1): d1, ("vm", 2): d2})


def test_revived_segment_holds_later_victims(tmp_path):
    repo = make_repo(tmp_path, QUARTER, rebuild_threshold=0.5)
    seq = [("a", "ABCD"), ("a", "ABxy"), ("b", "ABCD"), ("b", "ABzz")]
    images = {}
    reports = []
    for vm, letters in seq:
        data = blocks_from_letters(letters, BS)
        reports.append(ingest(repo, vm, data))
        images[(vm, max(repo.versions(vm)))] = data
        check_store(repo, images)
    # A, B removed after a's second version; b's first version revives the
    # segment; b's second version frees A, B again but removal already happened
    assert reports[1]["victims_removed"] == 2
    assert reports[3]["victims_removed"] == 0 and reports[3]["victims_held"] == 2
    meta = repo.store.get_meta(fingerprint(blocks_from_letters("ABCD", BS)))
    assert meta.removal_applied and meta.complete
    history = [h[0] for h in repo.store.removal_history()]
    assert len(history) == len(set(history)) == 1


def test_reingest_never_removes_twice(tmp_path):
    repo = make_repo(tmp_path, QUARTER, rebuild_threshold=0.5)
    a = blocks_from_letters("ABCDEFGH", BS)
    b = blocks_from_letters("ABCxEFGH", BS)
    images = {}
    for n, data in enumerate([a, b, a, b, a, b], 1):
        ingest(repo, "vm", data)
        images[("vm", n)] = data
        check_store(repo, images)
    history = [h[0] for h in repo.store.removal_history()]
    assert history and len(history) == len(set(history))


def test_null_only_image(tmp_path):
    repo = make_repo(tmp_path, QUARTER)
    data = bytes(8 * BS)
    ingest(repo, "vm", data)
    ingest(repo, "vm", data)
    assert table(repo, "vm", 1) == [NULL] * 8
    assert resolve_block(repo, "vm", 1, 3) == SynthesizedNull()
    check_store(repo, {("vm", 1): data, ("vm", 2): data})


def test_ingest_rejections(tmp_path):
    repo = make_repo(tmp_path, QUARTER)
    data = blocks_from_letters("ABCD", BS)
    fp = fingerprint(data)
    with pytest.raises(MissingSegmentsError) as ei:
        repo.ingest_version("vm", None, len(data), [fp])
    assert ei.value.fingerprints == [fp]
    repo.put_segment(fp, data)
    with pytest.raises(VersionOrderError):
        repo.ingest_version("vm", 2, len(data), [fp])
    with pytest.raises(ValueError):
        repo.ingest_version("vm", None, len(data) * 2, [fp])
    with pytest.raises(ValueError):
        repo.ingest_version("bad/vm", None, len(data), [fp])
    nulls = np.zeros(4, dtype=bool)
    with pytest.raises(IntegrityError):
        repo.ingest_version("vm", None, len(data), [fp], {fp: (nulls, bytes(80))})
    repo.ingest_version("vm", 1, len(data), [fp])


def test_incomplete_segment_rejected_until_revived(tmp_path):
    repo = make_repo(tmp_path, QUARTER, rebuild_threshold=0.5)
    a = blocks_from_letters("ABCD", BS)
    ingest(repo, "vm", a)
    ingest(repo, "vm", blocks_from_letters("ABCx", BS))
    ingest(repo, "vm", blocks_from_letters("xyzw", BS))
    fp = fingerprint(a)
    assert not repo.store.get_meta(fp).complete
    with pytest.raises(IncompleteSegmentsError):
        repo.ingest_version("other", None, len(a), [fp])
    ingest(repo, "other", a)  # the client re-uploads and the segment is revived
    assert repo.store.get_meta(fp).complete
