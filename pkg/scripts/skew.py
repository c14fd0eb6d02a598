"""Final accuracy against Dirichlet concentration, seed-averaged.

    python3 scripts/skew.py --alphas 0.1 1 10 1e6 --backbone medium
"""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from sidefed.config import load_config
from sidefed.experiments import skew_sweep

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "hetero3.cfg")
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.1, 1.0, 10.0, 1e6])
    ap.add_argument("--backbone", default=None, help="put every device on this backbone")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    base = load_config(args.config)
    if args.backbone:
        base = base.replace(devices=tuple(dataclasses.replace(d, backbone_id=args.backbone) for d in base.devices))
    runs = [skew_sweep(base.replace(seed=s), args.alphas) for s in range(args.seeds)]
    for a in args.alphas:
        vals = [r[a] for r in runs]
        print(f"alpha {a:>9g}  mean {np.mean(vals):.4f}  std {np.std(vals):.4f}")


if __name__ == "__main__":
    main()
