from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from revstore.chunking import ChunkParams, block_table, fingerprint
from revstore.errors import AtMostOnceError, DanglingReferenceError, IntegrityError, RefcountError
from revstore.segstore import COMPACT, COMPACT_FALLBACK, HOLE, PUNCH, SegmentStore, fp_from_id, segment_id

P = ChunkParams(16 * 4096, 4096)  # 16 blocks, filesystem-block aligned


def segment(pattern: str) -> bytes:
    """16 blocks; '.' is null, letters are distinct contents."""
    assert len(pattern) == 16
    return b"".join(bytes(4096) if c == "." else (c.encode() * 4096) for c in pattern)


def stored(tmp_path, pattern, *, punch_supported=None, refs=0):
    st_ = SegmentStore(tmp_path, P, durable=False, punch_supported=punch_supported)
    data = segment(pattern)
    fp = fingerprint(data)
    st_.put_segment(fp, data)
    if refs:
        st_.adjust_refcounts(fp, np.where(st_.get_meta(fp).nulls, 0, refs))
    return st_, fp, data


def release(store, fp, victims):
    d = np.zeros(16, dtype=np.int64)
    d[victims] = -store.get_meta(fp).refcounts[victims].astype(np.int64)
    store.adjust_refcounts(fp, d)


def test_segment_id_roundtrip():
    fp = fingerprint(b"abc")
    assert fp_from_id(segment_id(fp)) == fp
    with pytest.raises(ValueError):
        fp_from_id("zz")


def test_null_blocks_not_allocated(tmp_path):
    s, fp, _ = stored(tmp_path, "a...............")
    assert s.allocated_bytes(fp) == 4096
    s2, fp2, _ = stored(tmp_path / "x", "................")
    assert s2.allocated_bytes(fp2) == 0


def test_put_is_idempotent_and_verifies(tmp_path):
    s, fp, data = stored(tmp_path, "abcdefghijklmnop")
    assert s.put_segment(fp, data).created is False
    bad = bytearray(segment("bbcdefghijklmnop"))
    with pytest.raises(IntegrityError):
        s.put_segment(fingerprint(b"other"), bytes(bad))
    with pytest.raises(ValueError):
        s.put_segment(fp, data[:-1])


def test_index_survives_reopen(tmp_path):
    s, fp, data = stored(tmp_path, "ab..cd..ef..gh..", refs=1)
    again = SegmentStore(tmp_path, P, durable=False)
    assert again.query_exists([fp, fingerprint(b"nope")]) == [True, False]
    m = again.get_meta(fp)
    assert m.refcounts.tolist() == s.get_meta(fp).refcounts.tolist()
    assert m.block_fps == block_table(data, 4096)[1]


@pytest.mark.parametrize("threshold,victims,mech", [
    (0.2, [0, 1, 2], PUNCH),      # 3/16 < 0.2
    (0.1875, [0, 1, 2], COMPACT),  # 3/16 == threshold: not strictly below
    (0.0, [0], COMPACT),           # never punch
    (1.0, list(range(15)), PUNCH),  # 15/16 < 1.0
    (1.0, list(range(16)), COMPACT),  # all blocks: ratio 1 is not below 1
])
def test_strict_less_than_rule(tmp_path, threshold, victims, mech):
    s, fp, data = stored(tmp_path, "abcdefghijklmnop", refs=1)
    release(s, fp, victims)
    r = s.remove_blocks(fp, victims, threshold)
    assert r.mechanism == mech
    m = s.get_meta(fp)
    assert m.removal_applied and m.removed[victims].all()
    keep = [i for i in range(16) if i not in victims]
    assert s.read_blocks(fp, keep) == [data[i * 4096:(i + 1) * 4096] for i in keep]
    with pytest.raises(DanglingReferenceError):
        s.read_blocks(fp, victims[:1])


def test_punch_frees_and_compact_packs(tmp_path):
    s, fp, _ = stored(tmp_path / "p", "abcdefghijklmnop", refs=1)
    release(s, fp, [1, 2])
    s.remove_blocks(fp, [1, 2], 0.5)
    assert s.allocated_bytes(fp) == 14 * 4096
    assert s.get_meta(fp).offset_map[[1, 2]].tolist() == [HOLE, HOLE]

    c, fpc, data = stored(tmp_path / "c", "ab.defghijklmnop", refs=1)
    release(c, fpc, [0, 4])
    c.remove_blocks(fpc, [0, 4], 0.0)
    m = c.get_meta(fpc)
    assert m.compacted
    # survivors (nulls included) packed in logical order
    assert m.offset_map.tolist()[:6] == [HOLE, 0, 1, 2, HOLE, 3]
    assert c.allocated_bytes(fpc) == 13 * 4096
    assert c.data_path(fpc).stat().st_size == 14 * 4096
    fresh = SegmentStore(tmp_path / "c", P, durable=False)
    assert fresh.read_blocks(fpc, [1, 2, 3]) == [data[4096:8192], bytes(4096), data[3 * 4096:4 * 4096]]


def test_fallback_when_punch_unavailable(tmp_path):
    s, fp, _ = stored(tmp_path, "abcdefghijklmnop", punch_supported=False, refs=1)
    release(s, fp, [3])
    assert s.remove_blocks(fp, [3], 0.5).mechanism == COMPACT_FALLBACK


def test_at_most_once(tmp_path):
    s, fp, _ = stored(tmp_path, "abcdefghijklmnop", refs=1)
    release(s, fp, [0, 1])
    s.remove_blocks(fp, [0], 0.2)
    with pytest.raises(AtMostOnceError):
        s.remove_blocks(fp, [1], 0.2)
    assert [h[0] for h in s.removal_history()] == [segment_id(fp)]


def test_removal_preconditions(tmp_path):
    s, fp, _ = stored(tmp_path, "a.cdefghijklmnop", refs=1)
    with pytest.raises(RefcountError):
        s.remove_blocks(fp, [0], 0.2)
    with pytest.raises(ValueError):
        s.remove_blocks(fp, [1], 0.2)
    with pytest.raises(RefcountError):
        s.adjust_refcounts(fp, {0: -2})
    with pytest.raises(RefcountError):
        s.adjust_refcounts(fp, {1: 1})


def test_revive_restores_removed_blocks(tmp_path):
    s, fp, data = stored(tmp_path, "abcdefghijklmnop", refs=1)
    release(s, fp, [5])
    s.remove_blocks(fp, [5], 0.0)
    assert not s.get_meta(fp).complete
    r = s.put_segment(fp, data)
    assert r.revived
    m = s.get_meta(fp)
    assert m.complete and m.removal_applied
    s.adjust_refcounts(fp, {5: 1})
    assert s.read_blocks(fp, [5]) == [data[5 * 4096:6 * 4096]]


def test_orphans_reported(tmp_path):
    s, fp, data = stored(tmp_path, "abcdefghijklmnop")
    # a crash between the data rename and the metadata publish leaves these
    stray = fingerprint(b"stray")
    p = s.data_path(stray)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(b"x")
    t = s.data_path(fp).with_name(s.data_path(fp).name + ".tmp")
    t.write_bytes(b"y")
    again = SegmentStore(tmp_path, P, durable=False)
    assert stray not in again
    assert fp in again
    assert sorted(o.name for o in again.orphans()) == sorted([p.name, t.name])


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.text(alphabet="ab.", min_size=16, max_size=16), min_size=1, max_size=6))
def test_index_complete_after_reopen(tmp_path_factory, patterns):
    root = tmp_path_factory.mktemp("idx")
    s = SegmentStore(root, P, durable=False)
    fps = set()
    for pat in patterns:
        data = segment(pat)
        fp = fingerprint(data)
        s.put_segment(fp, data)
        fps.add(fp)
    again = SegmentStore(root, P, durable=False)
    assert set(again.fingerprints()) == fps
