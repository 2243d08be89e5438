#!/usr/bin/env python3
"""Run the desk-scale experiments and write reports under one directory.

Runs the backup/read bench in revdedup and conventional mode, then the
rebuild-threshold sweep.  Render figures afterwards with plot_report.py.
"""
from __future__ import annotations

import argparse
import sys

from revstore.cli import main as revstore


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="results", help="output directory [results]")
    p.add_argument("--spec", help="workload spec file; default spec if omitted")
    p.add_argument("--sweep-spec", help="workload spec file for the threshold sweep")
    p.add_argument("--modes", default="revdedup,conventional", help="comma-separated bench modes")
    p.add_argument("--transport", choices=["http", "local"], default="http")
    p.add_argument("--clients", type=int, default=8)
    p.add_argument("--order", choices=["after-all", "latest-first"], default="after-all")
    p.add_argument("--skip-sweep", action="store_true")
    a = p.parse_args(argv)

    spec = ["--spec", a.spec] if a.spec else []
    rc = 0
    for mode in a.modes.split(","):
        print(f"== bench {mode}", flush=True)
        rc |= revstore(["bench", "read", *spec, "--mode", mode, "--out", a.out,
                        "--transport", a.transport, "--clients", str(a.clients), "--order", a.order])
    if not a.skip_sweep:
        print("== threshold sweep", flush=True)
        sweep = ["--spec", a.sweep_spec] if a.sweep_spec else spec
        rc |= revstore(["bench", "sweep", *sweep, "--out", a.out])
    return rc


if __name__ == "__main__":
    sys.exit(main())
