"""``revstore`` command line: serve, backup, restore, fsck and bench."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .chunking import ChunkParams, parse_size
from .errors import ParamsMismatchError, StoreError

THRESHOLDS = [round(0.1 * i, 1) for i in range(11)]


def _env(name: str, default=None):
    v = os.environ.get("REVSTORE_" + name)
    return v if v not in (None, "") else default


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="revstore", description="Deduplicating backup store for VM images.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the storage server")
    s.add_argument("--store", help="store root directory [REVSTORE_STORE]")
    s.add_argument("--listen", help="host:port [REVSTORE_LISTEN, 127.0.0.1:8470]")
    s.add_argument("--segment-size", type=parse_size, help="[REVSTORE_SEGMENT_SIZE, 4M]")
    s.add_argument("--block-size", type=parse_size, help="[REVSTORE_BLOCK_SIZE, 4096]")
    s.add_argument("--rebuild-threshold", type=float, help="[REVSTORE_REBUILD_THRESHOLD, 0.2]")
    s.add_argument("--pipeline-depth", type=int, help="restore queue depth in blocks [1024]")
    s.add_argument("--no-reverse-dedup", dest="reverse_dedup", action="store_const", const=False,
                   help="segment-level dedup only")
    s.add_argument("--no-sync", dest="durable", action="store_const", const=False,
                   help="skip fsync (tests and benchmarks)")

    b = sub.add_parser("backup", help="back up an image as the next version of a VM")
    b.add_argument("--vm", required=True)
    b.add_argument("--image", required=True)
    b.add_argument("--server", default=_env("SERVER", "http://127.0.0.1:8470"))
    b.add_argument("--segment-size", type=parse_size, help="must match the server")
    b.add_argument("--block-size", type=parse_size, help="must match the server")
    b.add_argument("--parallel", type=int, default=4, help="upload connections")
    b.add_argument("--workers", type=int, default=None, help="fingerprinting threads")
    b.add_argument("--fingerprint-only", action="store_true",
                   help="compute fingerprints, print the plan summary, contact no server")
    b.add_argument("--plan-out", help="with --fingerprint-only: write the submission text here")

    r = sub.add_parser("restore", help="restore a stored version to a file")
    r.add_argument("--vm", required=True)
    r.add_argument("--version", type=int, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--server", default=_env("SERVER", "http://127.0.0.1:8470"))
    r.add_argument("--force", action="store_true", help="overwrite an existing file")

    f = sub.add_parser("fsck", help="verify a store offline")
    f.add_argument("--store", default=_env("STORE"), required=_env("STORE") is None)
    f.add_argument("--quick", action="store_true", help="skip re-reading segment data")
    f.add_argument("--json", action="store_true")

    bb = sub.add_parser("bench", help="synthetic workload experiments")
    bb.add_argument("kind", choices=["backup", "read", "sweep"])
    bb.add_argument("--spec", help="workload spec file (key = value); defaults if omitted")
    bb.add_argument("--mode", default="revdedup",
                    help="revdedup[:SEGSIZE] or conventional[:SEGSIZE] (backup/read)")
    bb.add_argument("--out", required=True, help="output directory")
    bb.add_argument("--transport", choices=["http", "local"], default=None)
    bb.add_argument("--clients", type=int, default=8)
    bb.add_argument("--threshold", type=float, default=0.2)
    bb.add_argument("--order", choices=["after-all", "latest-first"], default="after-all")
    bb.add_argument("--thresholds", default=",".join(map(str, THRESHOLDS)),
                    help="comma-separated rebuild thresholds (sweep)")
    bb.add_argument("--segment-size", type=parse_size, default=None, help="sweep segment size [4M]")
    return p


def cmd_serve(a) -> int:
    from .server import ServerConfig, serve
    cfg = ServerConfig.from_env(
        store_root=a.store, listen_address=a.listen, segment_size=a.segment_size,
        block_size=a.block_size, rebuild_threshold=a.rebuild_threshold,
        pipeline_depth=a.pipeline_depth, reverse_dedup=a.reverse_dedup, durable=a.durable)
    try:
        serve(cfg)
    except ParamsMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_backup(a) -> int:
    from . import client as C
    if not Path(a.image).is_file():
        raise C.ValidationError(f"image {a.image} is not a readable file")
    with C.ImageFile(a.image) as img:
        if a.fingerprint_only:
            defaults = ChunkParams()
            params = ChunkParams(a.segment_size or defaults.segment_size, a.block_size or defaults.block_size)
            plan = C.plan_backup(img, params, a.workers)
            if a.plan_out:
                Path(a.plan_out).write_bytes(plan.to_submission().encode())
            print(C.plan_to_json(plan))
            return 0
        params = None
        if a.segment_size or a.block_size:
            t = C.HttpTransport(a.server)
            remote = C.server_params(t)
            params = ChunkParams(a.segment_size or remote.segment_size, a.block_size or remote.block_size)
        summary = C.backup(img, a.vm, a.server, params=params, parallel=a.parallel, workers=a.workers)
    print(summary.to_text())
    return 0


def cmd_restore(a) -> int:
    from . import client as C
    n = C.restore(a.vm, a.version, a.out, a.server, force=a.force)
    print(f"vm_id={a.vm}\nversion_no={a.version}\nbytes={n}\nout={a.out}")
    return 0


def cmd_fsck(a) -> int:
    from .audit import audit_refcounts, fsck
    from .dedup import Repository, stored_params
    if stored_params(a.store) is None:
        print(f"error: {a.store} is not a store", file=sys.stderr)
        return 2
    repo = Repository(a.store, durable=False)
    rep = audit_refcounts(repo) if a.quick else fsck(repo)
    if a.json:
        print(json.dumps(rep.to_dict(), indent=2))
    else:
        print(f"segments={rep.segments} versions={rep.versions} blocks={rep.blocks_checked} "
              f"orphans={len(rep.orphans)} ok={rep.ok}")
        for line in rep.problems():
            print(f"problem: {line}")
        for o in rep.orphans:
            print(f"orphan: {o}")
    return 0 if rep.ok else 1


def cmd_bench(a) -> int:
    from .bench import harness as H
    from .bench.workload import WorkloadSpec, load_spec
    spec = load_spec(a.spec) if a.spec else WorkloadSpec()
    out = Path(a.out)
    H.write_spec(spec, out)
    if a.kind == "sweep":
        ts = [float(x) for x in a.thresholds.split(",") if x.strip()]
        points = H.run_threshold_sweep(spec, ts, segment_size=a.segment_size or 4 << 20,
                                       transport=a.transport or "local")
        path = H.write_sweep(points, out)
        for p in points:
            print(f"threshold={p.threshold:.2f} punches={p.punches} compactions={p.compactions} "
                  f"fallbacks={p.fallbacks} violations={p.rule_violations} "
                  f"removal_s={p.removal_seconds:.3f} small_free_ratio={p.free_extent_ratio:.4f}")
        print(f"wrote {path}")
        return 0 if all(p.rule_violations == 0 for p in points) else 1
    report = H.run_backup_bench(spec, a.mode, clients=a.clients, transport=a.transport or "http",
                                threshold=a.threshold, read_order=a.order)
    path = report.write(out)
    s = report.summary()
    s.pop("spec")
    for k, v in s.items():
        print(f"{k}={v}")
    if a.kind == "read":
        for r in report.reads:
            print(f"read vm={r.vm} version={r.version} mb_per_s={r.mb_per_s:.1f} "
                  f"hops={r.chain_hops_total} max_chain={r.max_chain_length} "
                  f"segments={r.distinct_segments} non_contiguous={r.non_contiguous_reads}")
    print(f"wrote {path}")
    return 0


COMMANDS = {"serve": cmd_serve, "backup": cmd_backup, "restore": cmd_restore,
            "fsck": cmd_fsck, "bench": cmd_bench}


def main(argv=None) -> int:
    from .client import ClientError
    a = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(a.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except ClientError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (StoreError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
