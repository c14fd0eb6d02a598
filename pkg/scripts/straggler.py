"""Time-to-target across all-fast, all-slow and mixed rosters, async vs sync.

    python3 scripts/straggler.py --seeds 2 --factors 1 4 10
"""

import argparse
from pathlib import Path

from sidefed.config import DeviceProfile, load_config
from sidefed.sim import simulate

ROOT = Path(__file__).resolve().parents[1]


def rosters(fast: DeviceProfile, factor: float):
    slow = DeviceProfile("slow", fast.tflops / factor, fast.bandwidth_mbps / factor, fast.backbone_id)
    return {"all-fast": (fast,) * 3, "all-slow": (slow,) * 3, "mixed": (fast, fast, slow)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "straggler.cfg")
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--factors", type=float, nargs="+", default=[10.0])
    args = ap.parse_args()
    base = load_config(args.config)
    fast = base.devices[0]
    print(f"{'seed':>4} {'factor':>6} {'roster':>9} {'async s':>9} {'sync s':>9} {'speedup':>8}")
    for seed in range(args.seeds):
        for factor in args.factors:
            for name, devs in rosters(fast, factor).items():
                cfg = base.replace(seed=seed, devices=devs)
                a = simulate(cfg).metrics.time_to_target
                s = simulate(cfg, sync=True).metrics.time_to_target
                ratio = f"{s / a:8.2f}" if a and s else "       -"
                fmt = lambda x: f"{x:9.3f}" if x is not None else "        -"  # noqa: E731
                print(f"{seed:>4} {factor:>6g} {name:>9} {fmt(a)} {fmt(s)} {ratio}")


if __name__ == "__main__":
    main()
