"""Own-data side networks against the jointly trained one under label skew.

    python3 scripts/single_vs_global.py --alpha 0.1 --seeds 5
"""

import argparse
from pathlib import Path

import numpy as np

from sidefed.config import load_config
from sidefed.experiments import single_vs_global

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "hetero3.cfg")
    ap.add_argument("--alpha", type=float, default=0.1)
    ap.add_argument("--seeds", type=int, default=5)
    args = ap.parse_args()
    base = load_config(args.config).replace(alpha=args.alpha)
    runs = []
    for seed in range(args.seeds):
        r = single_vs_global(base.replace(seed=seed))
        runs.append(r)
        per = "  ".join(f"{b}: {v['single']:.3f}/{v['global']:.3f}" for b, v in r["per_backbone"].items())
        print(f"seed {seed}  single {r['single']:.4f}  global {r['global']:.4f}  ({per})")
    print(f"mean    single {np.mean([r['single'] for r in runs]):.4f}  "
          f"global {np.mean([r['global'] for r in runs]):.4f}")


if __name__ == "__main__":
    main()
