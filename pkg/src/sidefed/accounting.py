"""Closed-form per-device cost of the forward-only protocol and three federated baselines.

All quantities are per device over a whole fine-tuning job:

* ``fl-lora``: local forward+backward (3x forward FLOPs) every round, adapters
  downloaded and uploaded every round.
* ``sfl-lora``: the device keeps the embeddings, first and last layers and
  the head; each sample sends activations and receives gradients at both cut
  points (4 transfers of ``seq x hidden``) and the device-side adapters are
  aggregated every round.
* ``fwdllm-lora``: forward-only perturbation training; each device runs its
  share of the global perturbations plus one clean forward per sample.
* ``forward-only side tuning``: one forward pass per sample and the upload of
  its activation packets (the device never downloads anything).
"""

from __future__ import annotations

import csv
import dataclasses
import io
import math
from dataclasses import dataclass

from . import backbone as bb
from .alignment import make_plan
from .client import client_cost
from .config import AccountingConfig, RunConfig

OURS = "forward-only side tuning"
METHODS = ("fl-lora", "sfl-lora", "fwdllm-lora", OURS)


@dataclass(frozen=True)
class CostRow:
    method: str
    memory_bytes: int
    flops: float
    comm_bytes: int


def lora_parameter_count(c: bb.BackboneConfig, rank: int, targets, num_layers: int | None = None) -> int:
    h, f = c.hidden, c.ffn
    shapes = {"q": (h, h), "k": (h, h), "v": (h, h), "o": (h, h), "ffn1": (h, f), "ffn2": (f, h)}
    per_layer = sum(rank * (shapes[t][0] + shapes[t][1]) for t in targets)
    return per_layer * (c.num_layers if num_layers is None else num_layers)


def training_activation_bytes(c: bb.BackboneConfig, seq: int, batch: int, elem_bytes: int,
                              num_layers: int | None = None) -> int:
    """Activations a backward pass must retain: per layer the block input, LN
    output, q/k/v, attention output, two attention maps, FFN input and the
    pre- and post-GELU hidden."""
    bsh = batch * seq * c.hidden
    per_layer = 7 * bsh + 2 * batch * c.heads * seq * seq + 2 * batch * seq * c.ffn
    return (c.num_layers if num_layers is None else num_layers) * per_layer * elem_bytes


def samples_per_device(a: AccountingConfig) -> int:
    return math.ceil(a.dataset_size / a.num_clients)


def cost_model_baselines(config: RunConfig) -> list[CostRow]:
    a = config.accounting
    bid = a.backbone or next(iter(config.backbones))
    c = config.backbones[bid]
    if a.seq > c.max_seq:
        c = dataclasses.replace(c, max_seq=a.seq)
    if a.rounds == 0:
        return [CostRow(m, 0, 0.0, 0) for m in METHODS]
    n = samples_per_device(a)
    passes = a.rounds * a.local_epochs
    fwd = bb.forward_flops(c, a.seq, 1)
    pbytes = bb.parameter_count(c) * a.param_bytes
    infer_act = bb.activation_bytes(c, a.seq, a.batch, 0, a.act_bytes)

    lora = lora_parameter_count(c, a.rank, a.lora_targets)
    lora_bytes = lora * a.param_bytes
    # weights + grads + two Adam moments for the adapters
    lora_train_bytes = 4 * lora_bytes
    fl = CostRow("fl-lora",
                 pbytes + lora_train_bytes + training_activation_bytes(c, a.seq, a.batch, a.act_bytes),
                 3.0 * fwd * n * passes,
                 2 * lora_bytes * a.rounds)

    split = dataclasses.replace(c, num_layers=2)
    split_lora = lora_parameter_count(c, a.rank, a.lora_targets, num_layers=2) * a.param_bytes
    cut = a.seq * c.hidden * a.act_bytes
    sfl = CostRow("sfl-lora",
                  bb.parameter_count(split) * a.param_bytes + 4 * split_lora
                  + training_activation_bytes(c, a.seq, a.batch, a.act_bytes, num_layers=2),
                  3.0 * bb.forward_flops(split, a.seq, 1) * n * passes,
                  4 * cut * n * passes + 2 * split_lora * a.rounds)

    per_device = a.perturbations / a.num_clients
    fwdllm = CostRow("fwdllm-lora",
                     pbytes + 2 * lora_bytes + infer_act,
                     fwd * (per_device + 1.0) * n * passes,
                     2 * lora_bytes * a.rounds)

    plan = make_plan([c], "auto")
    mine = client_cost(c, plan, n, a.batch, a.seq, wire_bytes=a.wire_bytes,
                       param_bytes=a.param_bytes, act_bytes=a.act_bytes)
    ours = CostRow(OURS, mine.peak_mem_bytes, mine.flops, mine.upload_bytes)
    return [fl, sfl, fwdllm, ours]


def summary(rows: list[CostRow]) -> dict[str, float]:
    """Reductions of the forward-only row against the baselines."""
    by = {r.method: r for r in rows}
    ours, fl = by[OURS], by["fl-lora"]
    others = [r for r in rows if r.method != OURS]
    best_comm = min(r.comm_bytes for r in others)
    return {
        "compute_reduction_vs_fl": 1.0 - ours.flops / fl.flops if fl.flops else 0.0,
        "comm_reduction_vs_best": 1.0 - ours.comm_bytes / best_comm if best_comm else 0.0,
        "sfl_comm_ratio": by["sfl-lora"].comm_bytes / ours.comm_bytes if ours.comm_bytes else 0.0,
        "memory_ratio_vs_fl": fl.memory_bytes / ours.memory_bytes if ours.memory_bytes else 0.0,
    }


def format_table(rows: list[CostRow]) -> str:
    head = f"{'method':<26}{'memory (GB)':>12}{'compute (TFLOPs)':>18}{'comm (MB)':>14}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r.method:<26}{r.memory_bytes / 1e9:>12.3f}{r.flops / 1e12:>18.2f}"
                     f"{r.comm_bytes / 1e6:>14.1f}")
    return "\n".join(lines)


def to_csv(rows: list[CostRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "memory_bytes", "flops", "comm_bytes"])
    for r in rows:
        w.writerow([r.method, r.memory_bytes, repr(r.flops), r.comm_bytes])
    return buf.getvalue()
