"""Cost table for a preset, optionally sweeping the adapter targets.

    python3 scripts/account.py --targets q,v --targets q,k,v,o,ffn1,ffn2
"""

import argparse
import dataclasses
from pathlib import Path

from sidefed import accounting
from sidefed.config import load_config

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=ROOT / "configs" / "paper_analog.cfg")
    ap.add_argument("--targets", action="append", help="comma-separated adapter targets; repeatable")
    args = ap.parse_args()
    base = load_config(args.config)
    for targets in args.targets or [",".join(base.accounting.lora_targets)]:
        acc = dataclasses.replace(base.accounting, lora_targets=tuple(targets.split(",")))
        rows = accounting.cost_model_baselines(base.replace(accounting=acc))
        s = accounting.summary(rows)
        print(f"adapter targets: {targets}")
        print(accounting.format_table(rows))
        print(f"compute reduction {100 * s['compute_reduction_vs_fl']:.2f}%  "
              f"comm reduction {100 * s['comm_reduction_vs_best']:.2f}%  "
              f"sfl/ours {s['sfl_comm_ratio']:.1f}x\n")


if __name__ == "__main__":
    main()
