#!/usr/bin/env python3
"""Sweep the swap-loss weight on the pinned benchmark.

Each grid point reruns the full experiment (deploy, attack, evaluate)
with only gro.swap_weight changed; results merge into <out>/sweep.csv.

Usage:
    python scripts/sweep_lambda.py [--config configs/pinned_synth.cfg]
        [--values 0.001,0.01,0.1,1.0] [--out runs/sweep_lambda]
"""
import argparse
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from grolab.grodefense import LAMBDA_GRID
from grolab.harness import load_config, sweep


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default="configs/pinned_synth.cfg")
    parser.add_argument("--values",
                        default=",".join(str(v) for v in LAMBDA_GRID),
                        help="comma-separated swap-weight grid")
    parser.add_argument("--out", default="runs/sweep_lambda")
    args = parser.parse_args()

    cfg = replace(load_config(args.config), out_dir=args.out,
                  defenses=("none", "gro"))
    values = [float(v) for v in args.values.split(",") if v.strip()]
    results = sweep(cfg, "lambda", values)

    failed = 0
    for value, outcome in results:
        if isinstance(outcome, Exception):
            print(f"lambda={value}: FAILED: {outcome}", file=sys.stderr)
            failed += 1
        else:
            gro10 = {(d, m): hr for d, m, k, hr, _ in outcome.summary_rows
                     if k == 10}
            print(f"lambda={value}: target_gro={gro10.get(('gro', 'target'), float('nan')):.4f} "
                  f"surrogate_gro={gro10.get(('gro', 'surrogate'), float('nan')):.4f} "
                  f"surrogate_none={gro10.get(('none', 'surrogate'), float('nan')):.4f}")
    print(f"merged results: {Path(args.out) / 'sweep.csv'}")
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
