#!/usr/bin/env python3
"""Desk-scale springs experiment: generate data, train, evaluate, sweep solver
budgets, and plot dynamics densities. Everything goes through the CLI so each
stage leaves a run manifest.

Usage:
    python scripts/run_springs_experiment.py --root out/springs [--epochs 50]
"""
import argparse
import sys
from pathlib import Path

import yaml

from stflow.cli import dispatch


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default="out/springs")
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--n-train", type=int, default=300)
    parser.add_argument("--augmentations", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    gen_cfg = root / "gen.yaml"
    gen_cfg.write_text(yaml.safe_dump({
        "n_train": args.n_train, "n_val": args.n_train // 3, "n_test": args.n_train // 3,
    }))

    stages = [
        ["gen-data", "--system", "springs", "--config", str(gen_cfg),
         "--out", str(root / "data"), "--seed", str(args.seed)],
        ["prior-baseline", "--data", str(root / "data"), "--out", str(root / "prior")],
        ["train", "--data", str(root / "data"), "--out", str(root / "run"),
         "--epochs", str(args.epochs), "--layers", "2",
         "--augmentations", str(args.augmentations), "--seed", str(args.seed)],
        ["eval", "--checkpoint", str(root / "run" / "best.pt"), "--data", str(root / "data"),
         "--out", str(root / "eval"), "--runs", "5", "--nfe", "50"],
        ["nfe-sweep", "--checkpoint", str(root / "run" / "best.pt"),
         "--data", str(root / "data"), "--out", str(root / "sweep"),
         "--nfe-list", "1,2,5,10,25,50", "--methods", "euler,rk4", "--limit", "64"],
    ]
    for argv in stages:
        print(f"\n== stflow {' '.join(argv)}")
        rc = dispatch(argv)
        if rc != 0:
            return rc
    print(f"\nall stages complete under {root}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
