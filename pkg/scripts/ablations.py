"""Alignment ablations: tap selection, side width and block coverage.

    python3 scripts/ablations.py taps --seeds 5
    python3 scripts/ablations.py width --backbone large
    python3 scripts/ablations.py coverage --config configs/straggler.cfg
"""

import argparse
import dataclasses
from pathlib import Path

import numpy as np

from sidefed.config import load_config
from sidefed.experiments import block_coverage, side_width_sweep, tap_selection

ROOT = Path(__file__).resolve().parents[1]


def mean_table(runs):
    return {k: float(np.mean([r[k] for r in runs])) for k in runs[0]}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("which", choices=["taps", "width", "coverage"])
    ap.add_argument("--config", default=ROOT / "configs" / "hetero3.cfg")
    ap.add_argument("--backbone", default=None, help="width: backbone to sweep (default: all)")
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    base = load_config(args.config)
    seeds = range(args.seeds)
    if args.which == "taps":
        runs = [tap_selection(base.replace(seed=s)) for s in seeds]
        for s, r in zip(seeds, runs):
            print(f"seed {s}  uniform {r['uniform']:.4f}  importance {r['importance']:.4f}  {r['importance_taps']}")
        print("mean", mean_table([{k: r[k] for k in ("uniform", "importance")} for r in runs]))
    elif args.which == "width":
        ids = [args.backbone] if args.backbone else [c.id for c in base.used_backbones()]
        for bid in ids:
            cfg = base.replace(devices=tuple(dataclasses.replace(d, backbone_id=bid) for d in base.devices))
            runs = [side_width_sweep(cfg.replace(seed=s), bid) for s in seeds]
            print(f"{bid} (hidden {base.backbones[bid].hidden}):", mean_table(runs))
    else:
        runs = [block_coverage(base.replace(seed=s)) for s in seeds]
        for B, acc in mean_table(runs).items():
            print(f"B={B:<3d} {acc:.4f}")


if __name__ == "__main__":
    main()
