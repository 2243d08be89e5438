"""Properties of a single VM's weekly chain under the synthetic workload."""
from __future__ import annotations

import pytest

from revstore.audit import audit_refcounts
from revstore.bench.workload import Workload, WorkloadSpec
from revstore.chunking import ChunkParams, MiB, fingerprint, iter_segments
from revstore.client import LocalTransport, backup
from revstore.dedup import Repository
from revstore.readpath import read_stats

SPEC = WorkloadSpec(seed=1, vm_count=1, versions=12, image_size=128 * MiB)
P = ChunkParams(4 * MiB, 4096)


@pytest.fixture(scope="module")
def weekly(tmp_path_factory):
    """Ingest twelve weeks, recording query answers, uploads and read stats after each."""
    repo = Repository(tmp_path_factory.mktemp("weekly"), P, durable=False)
    seen: set[bytes] = set()
    weeks = []
    for week, (img,) in Workload(SPEC).weeks():
        fps = [fingerprint(s) for s in iter_segments(img, P)]
        bits = repo.query_exists(fps)
        oracle = [fp in seen for fp in fps]
        summary = backup(img, "vm", LocalTransport(repo), parallel=1)
        seen.update(fps)
        stats = {v: read_stats(repo, "vm", v) for v in range(1, week + 1)}
        weeks.append(dict(bits=bits, oracle=oracle, fps=fps, summary=summary, stats=stats))
    return repo, weeks


def test_query_matches_fingerprint_oracle(weekly):
    _, weeks = weekly
    for k, w in enumerate(weeks, start=1):
        assert w["bits"] == w["oracle"]
        if k >= 2:
            assert sum(w["bits"]) / len(w["bits"]) >= 0.8


def test_week_two_upload_is_small(weekly):
    _, weeks = weekly
    w = weeks[1]
    s = w["summary"]
    new = {fp for fp, known in zip(w["fps"], w["oracle"]) if not known}
    assert s.segments_uploaded == len(new)
    assert s.bytes_uploaded == len(new) * P.segment_size
    assert s.segments_uploaded / s.segments_total <= 0.2
    assert s.bytes_uploaded < SPEC.image_size / 4


def test_indirect_pointers_never_decrease_over_time(weekly):
    _, weeks = weekly
    for t in range(1, len(weeks)):
        before, after = weeks[t - 1]["stats"], weeks[t]["stats"]
        for v, st in before.items():
            assert after[v].indirect_pointers >= st.indirect_pointers
        latest = after[max(after)]
        assert latest.indirect_pointers == 0 and latest.chain_hops_total == 0


def test_older_versions_are_more_fragmented(weekly):
    # Indirect-pointer counts of old versions are nearly flat (each differs from
    # its successor by one week of change); chain depth carries the ordering.
    repo, weeks = weekly
    for w in weeks:
        stats = w["stats"]
        for v in range(1, max(stats)):
            assert stats[v].max_chain_length >= stats[v + 1].max_chain_length
            assert stats[v].chain_hops_total >= stats[v + 1].chain_hops_total
    final = weeks[-1]["stats"]
    last = SPEC.versions
    assert final[1].distinct_segments > final[last].distinct_segments
    assert final[1].chain_hops_total > final[last].chain_hops_total
    assert final[1].non_contiguous_reads > final[last].non_contiguous_reads
    assert audit_refcounts(repo).ok
