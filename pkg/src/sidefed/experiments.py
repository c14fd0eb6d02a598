"""Paired experiment drivers: Single vs Global, label skew, tap selection, side width."""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import AlignmentConfig, RunConfig
from .data import generate
from .sidenet import SideNetwork, compute_deviation, side_forward
from .sim import Setup, build_plan, get_eval_set, prepare, simulate
from .tensor import no_grad


def single_vs_global(config: RunConfig) -> dict:
    """Each client's own-data side network against the jointly trained one.

    Both use the same plan, shards, initialization and evaluation data, so
    the only difference is whose activations reach the trainer.
    """
    setup = prepare(config)
    joint = simulate(config, setup=setup).metrics.final["per_backbone"]
    rows = []
    for shard, dev in zip(setup.shards, config.devices):
        solo_cfg = config.replace(devices=(dev,))
        solo = Setup(solo_cfg, setup.plan, [shard], {dev.backbone_id: setup.eval_sets[dev.backbone_id]},
                     SideNetwork(setup.plan, rank=config.train.rank, seed=config.seed_for("init")))
        acc = simulate(solo_cfg, setup=solo).metrics.final["per_backbone"][dev.backbone_id]
        rows.append({"client_id": shard.client_id, "backbone_id": dev.backbone_id,
                     "samples": len(shard), "single": acc, "global": joint[dev.backbone_id]})
    by_backbone = {}
    for bid in dict.fromkeys(r["backbone_id"] for r in rows):
        mine = [r for r in rows if r["backbone_id"] == bid]
        by_backbone[bid] = {"single": float(np.mean([r["single"] for r in mine])),
                            "global": joint[bid]}
    return {"clients": rows, "per_backbone": by_backbone,
            "single": float(np.mean([r["single"] for r in rows])),
            "global": float(np.mean([r["global"] for r in rows]))}


def skew_sweep(config: RunConfig, alphas=(0.1, 1.0, 10.0, 1e6)) -> dict[float, float]:
    """Final global accuracy per Dirichlet concentration."""
    return {a: simulate(config.replace(alpha=a)).metrics.final["global"] for a in alphas}


# ----------------------------------------------------------- tap selection

def block_importance(config: RunConfig, backbone_id: str) -> np.ndarray:
    """Leave-one-block-out importance of every layer of ``backbone_id``.

    Trains a single-backbone run that taps every layer, then scores layer
    ``l`` by how much the held-out side loss rises when the ladder bypasses
    that block. Offline analysis only; plans never depend on it.
    """
    c = config.backbones[backbone_id]
    devices = tuple(dataclasses.replace(d, backbone_id=backbone_id) for d in config.devices)
    align = AlignmentConfig(config.alignment.d_side, c.num_layers, "uniform")
    cfg = config.replace(devices=devices, alignment=align)
    result = simulate(cfg)
    es = get_eval_set(c, result.plan, generate(cfg.resolved_task(), cfg.eval_samples, "eval"),
                      (cfg.resolved_task(), cfg.eval_samples))
    target = compute_deviation(es.logits, es.labels)

    def loss(skip=()):
        with no_grad():
            s = side_forward(result.net, backbone_id, es.taps, skip).data
        return float(np.mean(np.sum((s + target) ** 2, axis=1)))

    base = loss()
    return np.array([loss({j}) - base for j in range(c.num_layers)])


def importance_taps(scores, B: int) -> tuple[int, ...]:
    """The ``B`` highest-scoring layers (1-based, ties to the deeper layer), sorted."""
    scores = np.asarray(scores)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], -i))
    return tuple(sorted(i + 1 for i in order[:B]))


def tap_selection(config: RunConfig) -> dict:
    """Uniform taps vs importance-selected taps at the plan's block count."""
    plan = build_plan(config)
    chosen = {}
    for c in config.used_backbones():
        if c.num_layers == plan.block_count:
            chosen[c.id] = plan.tap_layers[c.id]
        else:
            chosen[c.id] = importance_taps(block_importance(config, c.id), plan.block_count)
    uniform = simulate(config).metrics.final
    picked_cfg = config.replace(alignment=dataclasses.replace(config.alignment, taps=chosen))
    picked = simulate(picked_cfg).metrics.final
    return {"uniform": uniform["global"], "importance": picked["global"],
            "uniform_taps": {k: list(v) for k, v in plan.tap_layers.items()},
            "importance_taps": {k: list(v) for k, v in chosen.items()}}


def side_width_sweep(config: RunConfig, backbone_id: str, factors=(0.25, 1.0, 4.0)) -> dict[int, float]:
    """Single-backbone runs (every device on ``backbone_id``) across side widths."""
    h = config.backbones[backbone_id].hidden
    devices = tuple(dataclasses.replace(d, backbone_id=backbone_id) for d in config.devices)
    out = {}
    for f in factors:
        width = max(1, int(round(h * f)))
        align = AlignmentConfig(width, config.alignment.block_count, config.alignment.strategy)
        cfg = config.replace(devices=devices, alignment=align)
        out[width] = simulate(cfg).metrics.final["global"]
    return out


def block_coverage(config: RunConfig, counts=None) -> dict[int, float]:
    """Final accuracy as a function of the number of tapped blocks."""
    depth = min(c.num_layers for c in config.used_backbones())
    out = {}
    for B in counts or range(1, depth + 1):
        align = dataclasses.replace(config.alignment, block_count=B, taps={})
        out[B] = simulate(config.replace(alignment=align)).metrics.final["global"]
    return out
