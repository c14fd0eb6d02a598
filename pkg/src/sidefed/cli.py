"""Command line entry points: run, account, partition, gradcheck.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 numeric
failure, 4 protocol violation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import accounting
from .config import RunConfig, load_config
from .data import PartitionSpec, generate, heterogeneity, label_shares, partition
from .errors import ConfigError, NumericError, ProtocolError, SidefedError
from .gradcheck import gradient_suite
from .sidenet import save_checkpoint
from .sim import simulate

OUT_DIR_ENV = "SIDEFED_OUT_DIR"
GRAD_TOLERANCE = 1e-5


def _out_dir(args, config: RunConfig) -> Path:
    base = args.out_dir or os.environ.get(OUT_DIR_ENV) or "runs"
    return Path(base) / f"{config.name}-seed{config.seed}"


def _with_seed(config: RunConfig, seed: int | None) -> RunConfig:
    return config if seed is None else config.replace(seed=seed)


def write_artifacts(result, config: RunConfig, out: Path, prefix: str = "") -> None:
    out.mkdir(parents=True, exist_ok=True)
    m = result.metrics
    resolved = config.to_dict()
    (out / f"{prefix}metrics.json").write_text(m.to_json() + "\n")
    with open(out / f"{prefix}events.jsonl", "w") as fh:
        head = {"t": 0.0, "event": "config", "step": 0, "phase": "streaming",
                "seed": config.seed, "config": resolved}
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for e in result.server.events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
    with open(out / f"{prefix}curve.csv", "w") as fh:
        fh.write(f"# seed={config.seed} config={json.dumps(resolved, sort_keys=True)}\n")
        fh.write(m.curve_csv())
    result.net.meta = {"seed": config.seed, "config": resolved}
    save_checkpoint(result.net, out / f"{prefix}checkpoint.bin")


def run_one(config: RunConfig, out: Path, with_sync: bool) -> dict:
    result = simulate(config)
    write_artifacts(result, config, out)
    summary = {"seed": config.seed, "mode": result.metrics.mode, "out_dir": str(out),
               "final": result.metrics.final["global"], "time_to_target": result.metrics.time_to_target}
    if with_sync and config.mode == "async":
        sync = simulate(config, sync=True)
        write_artifacts(sync, config, out, prefix="sync_")
        summary["sync_time_to_target"] = sync.metrics.time_to_target
        summary["sync_final"] = sync.metrics.final["global"]
    return summary


def _run_job(job):
    return run_one(*job)


def cmd_run(args) -> int:
    config = _with_seed(load_config(args.config), args.seed)
    if config.mode == "accounting":
        return _print_account(config, args)
    seeds = [config.seed + i for i in range(max(1, args.sweep))]
    jobs = [(config.replace(seed=s), _out_dir(args, config.replace(seed=s)), args.with_sync) for s in seeds]
    if len(jobs) == 1:
        results = [run_one(*jobs[0])]
    else:
        workers = min(len(jobs), os.cpu_count() or 1)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    for r in results:
        ttt = r["time_to_target"]
        line = f"seed {r['seed']}: accuracy {r['final']:.4f}  time-to-target " + \
            (f"{ttt:.4f}s" if ttt is not None else "not reached")
        if "sync_time_to_target" in r:
            st = r["sync_time_to_target"]
            line += "  sync " + (f"{st:.4f}s" if st is not None else "not reached")
        print(f"{line}  -> {r['out_dir']}")
    return 0


def _print_account(config: RunConfig, args) -> int:
    rows = accounting.cost_model_baselines(config)
    print(accounting.format_table(rows))
    s = accounting.summary(rows)
    print()
    print(f"compute reduction vs fl-lora:       {100 * s['compute_reduction_vs_fl']:.2f}%")
    print(f"comm reduction vs best baseline:    {100 * s['comm_reduction_vs_best']:.2f}%")
    print(f"sfl-lora comm / forward-only comm:  {s['sfl_comm_ratio']:.1f}x")
    out = Path(args.out_dir or os.environ.get(OUT_DIR_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{config.name}-account.csv"
    path.write_text(accounting.to_csv(rows))
    print(f"\nwrote {path}")
    return 0


def cmd_account(args) -> int:
    return _print_account(_with_seed(load_config(args.config), args.seed), args)


def cmd_partition(args) -> int:
    config = _with_seed(load_config(args.config), args.seed)
    alpha = config.alpha if args.alpha is None else args.alpha
    clients = args.clients or config.num_clients
    if clients < 1:
        raise ConfigError("partition needs at least one client; set --clients or add devices")
    data = generate(config.resolved_task(), config.train_samples, "train")
    shards = partition(data, PartitionSpec(clients, alpha, config.seed_for("partition")))
    shares = label_shares(shards, data.num_classes)
    print(f"alpha={alpha} clients={clients} samples={len(data)} seed={config.seed}")
    print("client  samples  " + "  ".join(f"c{c:<5d}" for c in range(data.num_classes)))
    for s, row in zip(shards, shares):
        print(f"{s.client_id:>6d}  {len(s):>7d}  " + "  ".join(f"{x:6.3f}" for x in row))
    h = heterogeneity(shards, data.num_classes)
    print(f"mean total variation to pooled: {h['mean_tv']:.4f}")
    print(f"mean max label share:           {h['mean_max_share']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    errs = gradient_suite(seed=args.seed or 0)
    for name, e in errs.items():
        print(f"{name:<20s} {e:.3e}")
    worst = max(errs.values())
    print(f"max relative error {worst:.3e} (tolerance {GRAD_TOLERANCE:.0e})")
    return 0 if worst < GRAD_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the root seed")
    common.add_argument("--out-dir", default=None, help=f"artifact directory (env {OUT_DIR_ENV})")
    p = argparse.ArgumentParser(prog="sidefed", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="simulate one or more runs")
    r.add_argument("config")
    r.add_argument("--sweep", type=int, default=1, help="run N consecutive seeds in parallel")
    r.add_argument("--with-sync", action="store_true", help="also run the synchronous baseline")
    r.set_defaults(func=cmd_run)
    a = sub.add_parser("account", parents=[common], help="closed-form cost table")
    a.add_argument("config")
    a.set_defaults(func=cmd_account)
    q = sub.add_parser("partition", parents=[common], help="label shares per client")
    q.add_argument("config")
    q.add_argument("--alpha", type=float, default=None)
    q.add_argument("--clients", type=int, default=None)
    q.set_defaults(func=cmd_partition)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return 4
    except SidefedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
