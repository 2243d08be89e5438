#!/usr/bin/env python3
"""Plot bench reports written by ``revstore bench`` (needs matplotlib)."""
from __future__ import annotations

import argparse
import json
import sys
from collections import defaultdict
from pathlib import Path


def load_jsonl(path: Path) -> list[dict]:
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


def per_version(reads: list[dict], key: str) -> dict[str, list[tuple[int, float]]]:
    out: dict[str, list[tuple[int, float]]] = defaultdict(list)
    for r in reads:
        out[r["vm"]].append((r["version"], r[key]))
    return {vm: sorted(v) for vm, v in out.items()}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("results", nargs="?", default="results", help="directory with bench output")
    p.add_argument("--out", help="figure directory [RESULTS/figures]")
    a = p.parse_args(argv)
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib is not installed (pip install 'revstore[plot]')", file=sys.stderr)
        return 2
    res = Path(a.results)
    figs = Path(a.out) if a.out else res / "figures"
    figs.mkdir(parents=True, exist_ok=True)

    reports = {f.stem: load_jsonl(f) for f in sorted(res.glob("*.jsonl")) if f.name != "sweep.jsonl"}
    metrics = [("non_contiguous_reads", "non-contiguous reads"), ("chain_hops_total", "chain hops"),
               ("mb_per_s", "restore MB/s")]
    for key, label in metrics:
        fig, ax = plt.subplots(figsize=(6, 4))
        for mode, rows in reports.items():
            reads = [r for r in rows if r["type"] == "read"]
            for vm, pts in per_version(reads, key).items():
                ax.plot([v for v, _ in pts], [y for _, y in pts], marker=".", label=f"{mode} {vm}")
        ax.set_xlabel("version")
        ax.set_ylabel(label)
        ax.legend(fontsize=6)
        fig.tight_layout()
        fig.savefig(figs / f"reads-{key}.png", dpi=120)
        plt.close(fig)

    for mode, rows in reports.items():
        s = next(r for r in rows if r["type"] == "summary")
        print(f"{mode}: dedup_ratio={s['dedup_ratio']:.4f} oracle={s['oracle_ratio']:.4f} "
              f"global_only={s['global_only_ratio']}")

    sweep = res / "sweep.jsonl"
    if sweep.exists():
        pts = load_jsonl(sweep)
        t = [q["threshold"] for q in pts]
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.5))
        ax1.bar([x - 0.02 for x in t], [q["punches"] for q in pts], width=0.04, label="punch")
        ax1.bar([x + 0.02 for x in t], [q["compactions"] for q in pts], width=0.04, label="compact")
        ax1.set_xlabel("rebuild threshold")
        ax1.set_ylabel("segments")
        ax1.legend()
        ax2.plot(t, [q["free_extent_ratio"] for q in pts], marker="o")
        ax2.set_xlabel("rebuild threshold")
        ax2.set_ylabel("small free extents / data")
        fig.tight_layout()
        fig.savefig(figs / "sweep.png", dpi=120)
        plt.close(fig)
    print(f"figures in {figs}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
