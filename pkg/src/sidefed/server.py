"""Asynchronous server: arrival steps, shuffled activation cache, replay, standalone tuning."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .alignment import AlignmentPlan
from .backbone import FrozenBackbone, forward_with_taps
from .client import ActivationPacket, decode_packet, encode_packet
from .data import Dataset
from .errors import DimensionError, FormatError, PhaseError, ProtocolError
from .sidenet import SideNetwork, predict_from_taps

RECORD_HEADER = struct.Struct("<QdI")  # record id, arrival time, packet length

STREAMING, STANDALONE, DONE = "streaming", "standalone", "done"


@dataclass(eq=False)
class CacheRecord:
    record_id: int
    arrival_time: float
    _packet: ActivationPacket | None = None
    spill_path: Path | None = None

    @property
    def packet(self) -> ActivationPacket:
        if self._packet is not None:
            return self._packet
        return load_record(self.spill_path).packet

    @property
    def key(self) -> tuple[int, int]:
        p = self.packet
        return (p.client_id, int(p.sample_ids[0]) if p.batch else -1)


def dumps_record(rec: CacheRecord) -> bytes:
    body = encode_packet(rec.packet)
    return RECORD_HEADER.pack(rec.record_id, rec.arrival_time, len(body)) + body


def loads_record(blob: bytes) -> CacheRecord:
    if len(blob) < RECORD_HEADER.size:
        raise FormatError("truncated cache record")
    rid, t, n = RECORD_HEADER.unpack_from(blob)
    packet, end = decode_packet(blob, RECORD_HEADER.size)
    if end != RECORD_HEADER.size + n or end != len(blob):
        raise FormatError("cache record length mismatch")
    return CacheRecord(rid, t, packet)


def load_record(path) -> CacheRecord:
    rec = loads_record(Path(path).read_bytes())
    rec.spill_path = Path(path)
    return rec


class ActivationCache:
    """Shuffle-on-store repository of received packets.

    Each packet is inserted at a uniformly random position, so the stored
    order carries no trace of arrival order. Records past
    ``spill_threshold`` are written to ``spill_dir`` in the packet wire
    format and read back on use.
    """

    def __init__(self, seed: int = 0, spill_dir=None, spill_threshold: int | None = None):
        self.records: list[CacheRecord] = []
        self.rng = np.random.default_rng(seed)
        self.spill_dir = Path(spill_dir) if spill_dir is not None else None
        self.spill_threshold = spill_threshold
        self._next_id = 0

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def insert(self, packet: ActivationPacket, t: float = 0.0) -> CacheRecord:
        rec = CacheRecord(self._next_id, float(t), packet)
        self._next_id += 1
        if (self.spill_dir is not None and self.spill_threshold is not None
                and self._in_memory() >= self.spill_threshold):
            self.spill_dir.mkdir(parents=True, exist_ok=True)
            path = self.spill_dir / f"record_{rec.record_id:08d}.fmlp"
            path.write_bytes(dumps_record(rec))
            rec = CacheRecord(rec.record_id, rec.arrival_time, None, path)
        pos = int(self.rng.integers(0, len(self.records) + 1))
        self.records.insert(pos, rec)
        return rec

    def _in_memory(self) -> int:
        return sum(1 for r in self.records if r.spill_path is None)

    def sample(self, rng: np.random.Generator) -> CacheRecord:
        return self.records[int(rng.integers(0, len(self.records)))]

    def canonical(self) -> list[CacheRecord]:
        """Records sorted by content key, independent of arrival interleaving."""
        return sorted(self.records, key=lambda r: r.key)

    def multiset(self) -> list[tuple]:
        return sorted((r.packet.client_id, tuple(int(i) for i in r.packet.sample_ids))
                      for r in self.records)


@dataclass
class EvalSet:
    """Held-out data already pushed through one frozen backbone."""

    backbone_id: str
    logits: np.ndarray
    taps: list[np.ndarray]
    labels: np.ndarray

    @classmethod
    def build(cls, backbone: FrozenBackbone, plan: AlignmentPlan, data: Dataset,
              chunk: int = 64) -> EvalSet:
        logits, taps = [], [[] for _ in range(plan.block_count)]
        for lo in range(0, len(data), chunk):
            lg, tp = forward_with_taps(backbone, data.tokens[lo:lo + chunk],
                                       plan.tap_layers[backbone.id])
            logits.append(lg.data)
            for j, t in enumerate(tp):
                taps[j].append(t.data)
        return cls(backbone.id, np.concatenate(logits), [np.concatenate(t) for t in taps],
                   data.labels.copy())

    def __len__(self) -> int:
        return len(self.labels)

    def backbone_accuracy(self) -> float:
        return float((np.argmax(self.logits, axis=-1) == self.labels).mean())


def evaluate_net(net: SideNetwork, eval_sets: Mapping[str, EvalSet]) -> dict:
    """Corrected accuracy per backbone type and the sample-weighted global mean."""
    per, n_total, hits = {}, 0, 0.0
    for bid, es in eval_sets.items():
        pred = predict_from_taps(net, bid, es.logits, es.taps)
        acc = float((pred == es.labels).mean())
        per[bid] = acc
        n_total += len(es)
        hits += acc * len(es)
    return {"per_backbone": per, "global": hits / n_total if n_total else 0.0}


@dataclass
class TrainSettings:
    lr: float = 5e-4
    k_arrival: int = 1
    replay_budget: int = 8
    standalone_epochs: int = 20
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0


class ServerState:
    """Single-writer trainer state driven by packet arrivals and idle time."""

    def __init__(self, net: SideNetwork, client_ids: Iterable[int], settings: TrainSettings | None = None,
                 cache_seed: int = 0, replay_seed: int = 1, spill_dir=None,
                 spill_threshold: int | None = None):
        self.net = net
        self.settings = settings or TrainSettings()
        self.cache = ActivationCache(cache_seed, spill_dir, spill_threshold)
        self.done: dict[int, bool] = {int(c): False for c in client_ids}
        self.phase = STREAMING
        self.step = 0
        self.arrival_steps = 0
        self.replay_steps = 0
        self.standalone_steps = 0
        self.packets_received = 0
        self.rejected = 0
        self.replay_rng = np.random.default_rng(replay_seed)
        self.events: list[dict] = []
        self.now = 0.0

    # -------------------------------------------------------------- logging

    def log(self, event: str, t: float | None = None, **extra) -> None:
        rec = {"t": float(self.now if t is None else t), "event": event, "step": self.step,
               "phase": self.phase}
        rec.update(extra)
        self.events.append(rec)

    def write_events(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.events:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    # ------------------------------------------------------------- protocol

    def check_packet(self, packet: ActivationPacket) -> None:
        if self.phase != STREAMING:
            self.rejected += 1
            raise PhaseError(f"packet from client {packet.client_id} during {self.phase}")
        if packet.client_id not in self.done:
            self.rejected += 1
            raise ProtocolError(f"unknown client {packet.client_id}")
        if self.done[packet.client_id]:
            self.rejected += 1
            raise ProtocolError(f"client {packet.client_id} sent data after end-of-data")
        try:
            packet.validate(self.net.plan)
        except DimensionError as exc:
            self.rejected += 1
            raise ProtocolError(f"malformed packet from client {packet.client_id}: {exc}") from None

    def train_on(self, packet: ActivationPacket, kind: str, t: float | None = None) -> float:
        loss = self.net.step(packet, self.settings.lr, self.settings.betas, self.settings.weight_decay)
        self.step += 1
        if kind == "arrival":
            self.arrival_steps += 1
        elif kind == "replay":
            self.replay_steps += 1
        else:
            self.standalone_steps += 1
        self.log(f"{kind}_step", t, client_id=packet.client_id, loss=loss)
        return loss

    def store(self, packet: ActivationPacket, t: float | None = None) -> CacheRecord:
        self.packets_received += 1
        return self.cache.insert(packet, self.now if t is None else t)

    def on_packet(self, packet: ActivationPacket, t: float | None = None) -> None:
        """Immediate update on arrival: ``k_arrival`` steps, then shuffle into the cache."""
        if t is not None:
            self.now = t
        self.check_packet(packet)
        self.log("arrival", client_id=packet.client_id)
        for _ in range(self.settings.k_arrival):
            self.train_on(packet, "arrival")
        self.store(packet)

    def mark_done(self, client_id: int, t: float | None = None) -> None:
        if t is not None:
            self.now = t
        if client_id not in self.done:
            raise ProtocolError(f"unknown client {client_id}")
        if self.done[client_id]:
            raise ProtocolError(f"client {client_id} signalled end-of-data twice")
        self.done[client_id] = True
        self.log("client_done", client_id=client_id)

    def all_done(self) -> bool:
        return all(self.done.values())

    def begin_standalone(self, t: float | None = None) -> None:
        if t is not None:
            self.now = t
        if self.phase != STREAMING:
            raise PhaseError(f"cannot begin standalone from {self.phase}")
        if not self.all_done():
            raise PhaseError("standalone tuning before every client finished uploading")
        self.phase = STANDALONE
        self.log("phase_standalone")

    # --------------------------------------------------------------- replay

    def replay_step(self, t: float | None = None) -> float | None:
        if self.phase != STREAMING:
            raise PhaseError("replay only runs while streaming")
        if not len(self.cache):
            return None
        return self.train_on(self.cache.sample(self.replay_rng).packet, "replay", t)

    def idle_replay(self, budget_steps: int) -> int:
        """Up to ``budget_steps`` uniform replay steps; an empty cache takes none."""
        taken = 0
        while taken < budget_steps and len(self.cache):
            self.replay_step()
            taken += 1
        return taken

    # ----------------------------------------------------------- standalone

    def standalone_schedule(self, epochs: int) -> list[CacheRecord]:
        """Epoch-by-epoch visit order: a fresh permutation of the canonical record list."""
        base = self.cache.canonical()
        order: list[CacheRecord] = []
        for _ in range(epochs):
            order.extend(base[i] for i in self.replay_rng.permutation(len(base)))
        return order

    def finish(self, t: float | None = None) -> None:
        if t is not None:
            self.now = t
        self.phase = DONE
        self.log("phase_done")

    def standalone_tune(self, epochs: int | None = None) -> SideNetwork:
        """Full passes over the cache (one record per minibatch), then phase -> done."""
        if self.phase == STREAMING and self.all_done():
            self.begin_standalone()
        if self.phase != STANDALONE:
            raise PhaseError(f"standalone tuning requested during {self.phase}")
        epochs = self.settings.standalone_epochs if epochs is None else epochs
        for rec in self.standalone_schedule(epochs):
            self.train_on(rec.packet, "standalone")
        self.finish()
        return self.net

    def evaluate(self, eval_sets: Mapping[str, EvalSet]) -> dict:
        return evaluate_net(self.net, eval_sets)

    def counters(self) -> dict:
        return {"arrival_steps": self.arrival_steps, "replay_steps": self.replay_steps,
                "standalone_steps": self.standalone_steps, "total_steps": self.step,
                "packets_received": self.packets_received, "cached": len(self.cache),
                "rejected": self.rejected}
