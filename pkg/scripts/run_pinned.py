#!/usr/bin/env python3
"""Run the pinned benchmark end to end and print the summary table.

Usage:
    python scripts/run_pinned.py [--config configs/pinned_synth.cfg] [--out DIR]
"""
import argparse
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from dataclasses import replace

from grolab.harness import load_config, run_experiment


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/pinned_synth.cfg")
    parser.add_argument("--out", default="", help="override run.out")
    args = parser.parse_args()

    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    start = time.time()
    arts = run_experiment(cfg)
    elapsed = time.time() - start

    print(f"# {args.config} ({elapsed:.0f}s) -> {arts.out_dir}")
    print(f"{'defense':10s} {'model':10s} {'k':>3s} {'hr':>8s} {'ndcg':>8s}")
    for defense, model, k, hr, ndcg in arts.summary_rows:
        print(f"{defense:10s} {model:10s} {k:3d} {hr:8.4f} {ndcg:8.4f}")
    if arts.failed_stages:
        print("failed stages:", ", ".join(arts.failed_stages), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
