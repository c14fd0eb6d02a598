"""Deterministic discrete-event simulation of devices, links and the server.

Client timelines do not depend on the server, so every batch-ready and
upload-done time is computed up front from the pipeline recurrence
``ready_k = ready_{k-1} + compute_k`` and
``upload_end_k = max(upload_end_{k-1}, ready_k) + upload_k``. The event
loop then interleaves deliveries, server steps and evaluation ticks.

In sync mode each client computes one batch per round and the server only
sees a round's packets once the slowest client's upload has landed.
"""

from __future__ import annotations

import csv
import heapq
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import backbone as bb
from .alignment import AlignmentPlan, make_plan
from .client import ActivationPacket, client_cost, packet_bytes, process_batch
from .config import DeviceProfile, RunConfig
from .data import Dataset, LocalShard, PartitionSpec, generate, partition
from .server import DONE, STANDALONE, STREAMING, EvalSet, ServerState, TrainSettings, evaluate_net
from .sidenet import SideNetwork

EVENT_KINDS = ("upload_done", "server_step_done", "batch_ready", "client_done", "eval_tick")
_PRIORITY = {k: i for i, k in enumerate(EVENT_KINDS)}


@dataclass(order=True)
class SimEvent:
    time: float
    priority: int
    seq: int
    kind: str = field(compare=False)
    payload: dict = field(compare=False, default_factory=dict)


def side_step_flops(plan: AlignmentPlan, backbone_id: str, batch: int, seq: int, rank: int) -> float:
    """Forward plus backward matmul FLOPs of one side-network step (3x forward)."""
    h, d = plan.projection_shapes[backbone_id]
    per_block = 2 * batch * seq * (h * d + 2 * d * rank)
    return 3.0 * (plan.block_count * per_block + 2 * batch * d * plan.num_classes)


@dataclass
class ClientMetrics:
    client_id: int
    device: str
    backbone_id: str
    samples: int
    packets: int
    flops: float
    bytes: int
    finish_time: float


@dataclass
class RunMetrics:
    mode: str
    seed: int
    clients: list[ClientMetrics]
    server: dict
    curve: list[tuple[float, float, str]]
    final: dict
    target_accuracy: float
    time_to_target: float | None
    totals: dict
    plan: dict
    config: dict

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curve"] = [list(p) for p in self.curve]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sim_time_s", "accuracy", "phase"])
        for t, acc, phase in self.curve:
            w.writerow([repr(t), repr(acc), phase])
        return buf.getvalue()


@dataclass
class SimResult:
    metrics: RunMetrics
    net: SideNetwork
    server: ServerState
    plan: AlignmentPlan


# ------------------------------------------------------------------ setup

_BACKBONES: dict[bb.BackboneConfig, bb.FrozenBackbone] = {}
_EVAL_SETS: dict[tuple, EvalSet] = {}


def get_backbone(config: bb.BackboneConfig) -> bb.FrozenBackbone:
    """Frozen backbones are pure functions of their config, so they are built once."""
    if config not in _BACKBONES:
        _BACKBONES[config] = bb.build(config)
    return _BACKBONES[config]


def get_eval_set(config: bb.BackboneConfig, plan: AlignmentPlan, data: Dataset, key) -> EvalSet:
    k = (config, plan.tap_layers[config.id], key)
    if k not in _EVAL_SETS:
        _EVAL_SETS[k] = EvalSet.build(get_backbone(config), plan, data)
    return _EVAL_SETS[k]


def build_plan(config: RunConfig) -> AlignmentPlan:
    al = config.alignment
    plan = make_plan(config.used_backbones(), al.d_side, block_count=al.block_count,
                     strategy=al.strategy)
    for bid, layers in al.taps.items():
        if bid in plan.tap_layers:
            plan = plan.with_taps(bid, layers)
    return plan


@dataclass
class Setup:
    config: RunConfig
    plan: AlignmentPlan
    shards: list[LocalShard]
    eval_sets: dict[str, EvalSet]
    net: SideNetwork


def prepare(config: RunConfig, plan: AlignmentPlan | None = None) -> Setup:
    config.validate()
    task = config.resolved_task()
    train = generate(task, config.train_samples, "train")
    held_out = generate(task, config.eval_samples, "eval")
    shards = partition(train, PartitionSpec(config.num_clients, config.alpha, config.seed_for("partition")))
    plan = plan or build_plan(config)
    eval_sets = {c.id: get_eval_set(c, plan, held_out, (task, config.eval_samples))
                 for c in config.used_backbones()}
    net = SideNetwork(plan, rank=config.train.rank, seed=config.seed_for("init"))
    return Setup(config, plan, shards, eval_sets, net)


# -------------------------------------------------------------- timelines

def batch_sizes(n: int, batch: int) -> list[int]:
    full, rest = divmod(n, batch)
    return [batch] * full + ([rest] if rest else [])


def pipeline_times(compute: list[float], upload: list[float]) -> tuple[list[float], list[float]]:
    """Batch-ready and upload-done times for one client with one upload in flight."""
    ready, done = [], []
    t_ready = t_up = 0.0
    for c, u in zip(compute, upload):
        t_ready += c
        t_up = max(t_up, t_ready) + u
        ready.append(t_ready)
        done.append(t_up)
    return ready, done


@dataclass
class Delivery:
    time: float  # when the trainer may consume the packet
    client: int
    index: int


def client_timelines(config: RunConfig, plan: AlignmentPlan, shards: list[LocalShard], sync: bool):
    """Per-client (ready, upload_done) lists and the delivery order seen by the server."""
    seq, batch = config.task.seq, config.train.batch
    costs = []
    for shard, dev in zip(shards, config.devices):
        c = config.backbones[dev.backbone_id]
        sizes = batch_sizes(len(shard), batch)
        comp = [dev.compute_time(bb.forward_flops(c, seq, b)) for b in sizes]
        up = [dev.upload_time(packet_bytes(c.id, plan.block_count, b, seq, c.hidden, c.num_classes))
              for b in sizes]
        costs.append((comp, up))
    ready, done, deliveries = [], [], []
    if not sync:
        for k, (comp, up) in enumerate(costs):
            r, d = pipeline_times(comp, up)
            ready.append(r)
            done.append(d)
            deliveries.extend(Delivery(t, k, i) for i, t in enumerate(d))
    else:
        ready = [[] for _ in costs]
        done = [[] for _ in costs]
        rounds = max(len(c[0]) for c in costs)
        start = 0.0
        for r in range(rounds):
            active = [k for k, c in enumerate(costs) if r < len(c[0])]
            for k in active:
                ready[k].append(start + costs[k][0][r])
                done[k].append(ready[k][-1] + costs[k][1][r])
            barrier = max(done[k][-1] for k in active)
            deliveries.extend(Delivery(barrier, k, r) for k in active)
            start = barrier
    deliveries.sort(key=lambda d: (d.time, d.client, d.index))
    return ready, done, deliveries


# -------------------------------------------------------------- event loop

def default_server_tflops(config: RunConfig) -> float:
    return config.server.tflops or 100.0 * max(d.tflops for d in config.devices)


def default_eval_interval(config: RunConfig, done: list[list[float]]) -> float:
    """Explicit setting, else 1/100 of the longest client upload timeline."""
    if config.server.eval_interval:
        return config.server.eval_interval
    return max(d[-1] for d in done if d) / 100.0


def simulate(config: RunConfig, *, sync: bool | None = None, setup: Setup | None = None,
             max_eval_ticks: int = 5000) -> SimResult:
    """Run one protocol execution; returns metrics, the trained network and server state."""
    sync = config.mode == "sync" if sync is None else sync
    setup = setup or prepare(config)
    plan, shards, eval_sets, net = setup.plan, setup.shards, setup.eval_sets, setup.net
    tr = config.train
    settings = TrainSettings(lr=tr.lr, k_arrival=tr.k_arrival, replay_budget=tr.replay_budget,
                             standalone_epochs=tr.standalone_epochs, weight_decay=tr.weight_decay)
    server = ServerState(net, [s.client_id for s in shards], settings, cache_seed=config.seed_for("cache"),
                         replay_seed=config.seed_for("replay"),
                         spill_threshold=config.server.spill_threshold)
    for s in shards:
        s.reset()
    ready, done, deliveries = client_timelines(config, plan, shards, sync)
    server_flops_rate = default_server_tflops(config) * 1e12
    interval = default_eval_interval(config, done)
    seq = config.task.seq

    events: list[SimEvent] = []
    counter = 0

    def push(t: float, event: str, **payload) -> None:
        nonlocal counter
        heapq.heappush(events, SimEvent(t, _PRIORITY[event], counter, event, payload))
        counter += 1

    packets: dict[tuple[int, int], ActivationPacket] = {}
    for k, shard in enumerate(shards):
        for i, t in enumerate(ready[k]):
            push(t, "batch_ready", client=k, index=i)
    for dv in deliveries:
        push(dv.time, "upload_done", client=dv.client, index=dv.index)
    for k in range(len(shards)):
        push(max(done[k][-1], max((d.time for d in deliveries if d.client == k), default=0.0)),
             "client_done", client=k)
    push(0.0, "eval_tick")

    queue: list[ActivationPacket] = []
    next_delivery = 0  # index into deliveries of the next undelivered packet
    busy = False
    budget = 0
    schedule: list = []
    sched_pos = 0
    busy_time = 0.0
    streaming_end = None
    curve: list[tuple[float, float, str]] = []
    client_bytes = [0] * len(shards)
    client_flops = [0.0] * len(shards)
    client_packets = [0] * len(shards)
    ticks = 0

    def step_time(p: ActivationPacket) -> float:
        return side_step_flops(plan, p.backbone_id, p.batch, seq, net.rank) / server_flops_rate

    def start(t: float, packet: ActivationPacket, kind: str, **extra) -> None:
        nonlocal busy, busy_time
        dt = step_time(packet)
        busy = True
        busy_time += dt
        push(t + dt, "server_step_done", packet=packet, kind=kind, **extra)

    def try_start(t: float) -> None:
        nonlocal sched_pos, schedule, streaming_end, budget
        if busy or server.phase == DONE:
            return
        if server.phase == STREAMING:
            if queue:
                packet = queue.pop(0)
                server.log("arrival", t, client_id=packet.client_id)
                if settings.k_arrival == 0:
                    server.store(packet, t)
                    try_start(t)
                else:
                    start(t, packet, "arrival", remaining=settings.k_arrival)
                return
            if server.all_done():
                streaming_end = t
                server.begin_standalone(t)
                schedule = server.standalone_schedule(settings.standalone_epochs)
                sched_pos = 0
            elif len(server.cache) and budget > 0:
                horizon = deliveries[next_delivery].time if next_delivery < len(deliveries) else np.inf
                rec = server.cache.sample(server.replay_rng)
                if t + step_time(rec.packet) <= horizon:
                    budget -= 1
                    start(t, rec.packet, "replay")
                return
            else:
                return
        if server.phase == STANDALONE:
            if sched_pos < len(schedule):
                rec = schedule[sched_pos]
                sched_pos += 1
                start(t, rec.packet, "standalone")
            else:
                server.finish(t)

    def record_eval(t: float) -> None:
        acc = evaluate_net(net, eval_sets)["global"]
        curve.append((t, acc, server.phase))

    while events and server.phase != DONE:
        ev = heapq.heappop(events)
        t = ev.time
        server.now = t
        p = ev.payload
        if ev.kind == "batch_ready":
            k, i = p["client"], p["index"]
            dev = config.devices[k]
            packet = process_batch(get_backbone(config.backbones[dev.backbone_id]), plan, shards[k], tr.batch)
            packets[(k, i)] = packet
            client_flops[k] += bb.forward_flops(config.backbones[dev.backbone_id], seq, packet.batch)
            client_bytes[k] += packet.payload_bytes()
            client_packets[k] += 1
            server.log("batch_ready", t, client_id=shards[k].client_id)
        elif ev.kind == "upload_done":
            k, i = p["client"], p["index"]
            packet = packets.pop((k, i))
            server.check_packet(packet)
            queue.append(packet)
            next_delivery += 1
            budget = settings.replay_budget
            server.log("upload_done", t, client_id=shards[k].client_id)
            try_start(t)
        elif ev.kind == "client_done":
            server.mark_done(shards[p["client"]].client_id, t)
            try_start(t)
        elif ev.kind == "server_step_done":
            busy = False
            packet, kind = p["packet"], p["kind"]
            server.train_on(packet, kind, t)
            if kind == "arrival":
                if p["remaining"] > 1:
                    start(t, packet, "arrival", remaining=p["remaining"] - 1)
                    continue
                server.store(packet, t)
            try_start(t)
        elif ev.kind == "eval_tick":
            record_eval(t)
            ticks += 1
            if server.phase != DONE and ticks < max_eval_ticks:
                push(t + interval, "eval_tick")

    end_time = server.now
    if not curve or curve[-1][0] != end_time or curve[-1][2] != DONE:
        record_eval(end_time)
    target = config.server.target_accuracy
    ttt = next((t for t, acc, _ in curve if acc >= target), None)
    final = evaluate_net(net, eval_sets)

    clients = []
    for k, (shard, dev) in enumerate(zip(shards, config.devices)):
        finish = max(d.time for d in deliveries if d.client == k) if sync else done[k][-1]
        clients.append(ClientMetrics(shard.client_id, dev.name, dev.backbone_id, len(shard), client_packets[k],
                                     client_flops[k], client_bytes[k], finish))
    sv = server.counters()
    sv.update({"streaming_end": streaming_end, "end_time": end_time,
               "standalone_time": end_time - (streaming_end or end_time), "busy_time": busy_time,
               "tflops": default_server_tflops(config), "eval_interval": interval})
    totals = {"flops": sum(c.flops for c in clients), "bytes": sum(c.bytes for c in clients),
              "samples": sum(c.samples for c in clients), "packets": sum(c.packets for c in clients)}
    metrics = RunMetrics("sync" if sync else "async", config.seed, clients, sv, curve, final,
                         target, ttt, totals, plan.to_dict(), config.to_dict())
    return SimResult(metrics, net, server, plan)


def simulate_sync_baseline(config: RunConfig, **kw) -> SimResult:
    """Same trainer, but every round waits for one packet from each remaining client."""
    return simulate(config, sync=True, **kw)


def accounted_bytes(config: RunConfig, plan: AlignmentPlan, shards: list[LocalShard]) -> list[int]:
    """Upload bytes per client from the closed-form client cost model."""
    return [client_cost(config.backbones[d.backbone_id], plan, len(s), config.train.batch,
                        config.task.seq).upload_bytes for s, d in zip(shards, config.devices)]
