from __future__ import annotations

import numpy as np
import pytest
from conftest import blocks_from_letters, check_store, ingest, make_repo, random_blocks

from revstore.catalog import TAG_INDIRECT
from revstore.chunking import ChunkParams
from revstore.errors import CorruptionError, UnknownVersionError
from revstore.readpath import RestoreStream, read_stats, resolve_block, restore_bytes

BS = 512
P = ChunkParams(4 * BS, BS)


def stamp(i: int, v: int) -> bytes:
    b = bytearray(BS)
    b[:16] = i.to_bytes(8, "little") + v.to_bytes(8, "little")
    b[16:] = bytes([(i * 7 + v) % 251 + 1]) * (BS - 16)
    return bytes(b)


def test_96_version_chain(tmp_path):
    repo = make_repo(tmp_path, P)
    images = {}
    for v in range(1, 97):
        # block 0 never changes; the others change every version
        data = stamp(0, 0) + b"".join(stamp(i, v) for i in range(1, 8))
        ingest(repo, "vm", data)
        images[("vm", v)] = data
    check_store(repo, images)
    loc = resolve_block(repo, "vm", 1, 0)
    assert loc.hops == 95
    st = read_stats(repo, "vm", 1)
    assert st.max_chain_length == 95 and st.chain_hops_total == 95
    s = RestoreStream(repo, "vm", 1)
    assert b"".join(s) == images[("vm", 1)]
    assert s.hops_total == 95
    latest = RestoreStream(repo, "vm", 96)
    b"".join(latest)
    assert latest.hops_total == 0


def test_all_null_restore_reads_nothing(tmp_path):
    repo = make_repo(tmp_path, P)
    ingest(repo, "vm", bytes(10 * BS + 7))
    before = repo.store.io.read_calls
    s = RestoreStream(repo, "vm", 1)
    out = b"".join(s)
    assert out == bytes(10 * BS + 7)
    assert repo.store.io.read_calls == before and s.bytes_read == 0
    assert s.null_blocks == 12
    st = read_stats(repo, "vm", 1)
    assert st.null_blocks == 12 and st.distinct_segments == 0


@pytest.mark.parametrize("depth", [1, 3, 1024])
def test_pipeline_depths(tmp_path, depth):
    repo = make_repo(tmp_path, P)
    rng = np.random.default_rng(depth)
    a = random_blocks(rng, 20, BS) + b"tail"
    b = a[:3 * BS] + random_blocks(rng, 2, BS) + a[5 * BS:]
    ingest(repo, "vm", a)
    ingest(repo, "vm", b)
    assert b"".join(RestoreStream(repo, "vm", 1, depth=depth)) == a
    assert b"".join(RestoreStream(repo, "vm", 2, depth=depth, prefetch=False)) == b


def test_layout_stats_latest_contiguous(tmp_path):
    repo = make_repo(tmp_path, P)
    ingest(repo, "vm", blocks_from_letters("ABCDEFGHIJKLMNOP", BS))
    ingest(repo, "vm", blocks_from_letters("ABCDEFGxIJKLMNOP", BS))
    new = read_stats(repo, "vm", 2)
    old = read_stats(repo, "vm", 1)
    assert new.indirect_pointers == 0 and new.chain_hops_total == 0
    assert old.indirect_pointers > 0
    # the segment EFGx was laid out after the three shared ones
    assert new.non_contiguous_reads >= 1
    assert old.non_contiguous_reads > new.non_contiguous_reads


def test_unknown_version(tmp_path):
    repo = make_repo(tmp_path, P)
    ingest(repo, "vm", blocks_from_letters("ABCD", BS))
    with pytest.raises(UnknownVersionError):
        restore_bytes(repo, "vm", 2)
    with pytest.raises(UnknownVersionError):
        read_stats(repo, "nope", 1)


def test_backward_pointer_detected(tmp_path):
    repo = make_repo(tmp_path, P)
    ingest(repo, "vm", blocks_from_letters("ABCD", BS))
    ingest(repo, "vm", blocks_from_letters("ABCx", BS))
    t = repo.catalog.load_table("vm", 2).copy()
    t["tag"][0] = TAG_INDIRECT
    t["a"][0] = 1
    repo.catalog.write_table("vm", 2, t)
    with pytest.raises(CorruptionError):
        restore_bytes(repo, "vm", 2)
    with pytest.raises(CorruptionError):
        resolve_block(repo, "vm", 2, 0)


def test_restore_blocks_concurrent_ingest_consistently(tmp_path):
    """A restore holds the VM's read lock; ingests wait and the bytes stay right."""
    import threading
    repo = make_repo(tmp_path, P)
    rng = np.random.default_rng(5)
    images = [random_blocks(rng, 64, BS)]
    ingest(repo, "vm", images[0])
    errors = []

    def reader():
        try:
            for _ in range(5):
                assert restore_bytes(repo, "vm", 1) == images[0]
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    t = threading.Thread(target=reader)
    t.start()
    for _ in range(4):
        cur = bytearray(images[-1])
        at = int(rng.integers(0, 64)) * BS
        cur[at:at + BS] = random_blocks(rng, 1, BS)
        images.append(bytes(cur))
        ingest(repo, "vm", images[-1])
    t.join()
    assert not errors
    check_store(repo, {("vm", i + 1): d for i, d in enumerate(images)})
