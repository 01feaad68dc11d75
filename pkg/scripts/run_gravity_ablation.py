#!/usr/bin/env python3
"""Desk-scale gravity ablation: random-walk prior vs uninformed Gaussians, and
the architecture variants (no spatial layer, frozen graph), trained with a
shared seed and budget.

Usage:
    python scripts/run_gravity_ablation.py --root out/gravity [--epochs 12]
"""
import argparse
import sys
from pathlib import Path

import yaml

from stflow.cli import dispatch


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--root", default="out/gravity")
    parser.add_argument("--epochs", type=int, default=12)
    parser.add_argument("--n-train", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)
    (root / "gen.yaml").write_text(yaml.safe_dump({
        "n_train": args.n_train, "n_val": args.n_train // 3, "n_test": args.n_train // 3,
    }))
    (root / "suite.yaml").write_text(yaml.safe_dump({
        "base": {
            "model": {"n_layers": 2},
            "train": {"epochs": args.epochs, "n_augmentations": 1, "seed": args.seed},
        },
        "variants": [
            {"name": "gauss_zero_prior", "prior_kind": "gauss_zero"},
            {"name": "gauss_last_prior", "prior_kind": "gauss_last"},
            {"name": "walk_s1", "s": 1.0},
            {"name": "no_spatial", "use_spatial": False},
            {"name": "no_graph_updating", "graph_updates": False},
        ],
    }))

    stages = [
        ["gen-data", "--system", "gravity", "--config", str(root / "gen.yaml"),
         "--out", str(root / "data"), "--seed", "1"],
        ["prior-baseline", "--data", str(root / "data"), "--out", str(root / "prior")],
        ["ablate", "--suite", str(root / "suite.yaml"), "--data", str(root / "data"),
         "--out", str(root / "ablation"), "--runs", "2", "--nfe", "10"],
    ]
    for argv in stages:
        print(f"\n== stflow {' '.join(argv)}")
        rc = dispatch(argv)
        if rc != 0:
            return rc
    print(f"\nablation table at {root / 'ablation' / 'ablation_table.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
