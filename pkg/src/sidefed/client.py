"""Device runtime: forward-only pass over the local shard, one packet per batch.

Packets carry block taps and the deviation at 16-bit wire precision. They
never carry tokens, labels or logits.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .alignment import AlignmentPlan
from .backbone import (FrozenBackbone, activation_bytes, forward_flops, forward_with_taps,
                       parameter_count)
from .data import LocalShard
from .errors import DimensionError, FormatError
from .sidenet import compute_deviation

PACKET_MAGIC = b"FMLP"
PACKET_VERSION = 1
WIRE_DTYPE = np.dtype("<f2")
_FIXED = struct.Struct("<4sHIH")  # magic, version, client_id, len(backbone_id)
_DIMS = struct.Struct("<HHHIH")  # B, batch, seq, hidden, num_classes


@dataclass(eq=False)
class ActivationPacket:
    client_id: int
    backbone_id: str
    sample_ids: np.ndarray
    seq_len: int
    blocks: list[np.ndarray]
    deviation: np.ndarray
    epoch_flag: int = 0
    _f64: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def batch(self) -> int:
        return len(self.sample_ids)

    @property
    def hidden(self) -> int:
        return self.blocks[0].shape[-1]

    @property
    def num_classes(self) -> int:
        return self.deviation.shape[-1]

    def block_arrays(self) -> list[np.ndarray]:
        if self._f64 is None:
            self._f64 = [b.astype(np.float64) for b in self.blocks]
        return self._f64

    def deviation_array(self) -> np.ndarray:
        return self.deviation.astype(np.float64)

    def payload_bytes(self) -> int:
        return packet_bytes(self.backbone_id, len(self.blocks), self.batch, self.seq_len,
                            self.hidden, self.num_classes)

    def validate(self, plan: AlignmentPlan) -> None:
        if self.backbone_id not in plan.tap_layers:
            raise DimensionError(f"backbone {self.backbone_id!r} not in plan")
        if len(self.blocks) != plan.block_count:
            raise DimensionError(f"{len(self.blocks)} blocks, plan has {plan.block_count}")
        h = plan.projection_shapes[self.backbone_id][0]
        for b in self.blocks:
            if b.shape != (self.batch, self.seq_len, h):
                raise DimensionError(f"block shape {b.shape} != {(self.batch, self.seq_len, h)}")
        if self.deviation.shape != (self.batch, plan.num_classes):
            raise DimensionError(f"deviation shape {self.deviation.shape}")


def header_bytes(backbone_id: str, batch: int) -> int:
    return _FIXED.size + len(backbone_id.encode()) + _DIMS.size + 4 * batch


def packet_bytes(backbone_id: str, B: int, batch: int, seq: int, hidden: int,
                 num_classes: int, wire_bytes: int = 2) -> int:
    """Closed-form wire size of one packet."""
    return (header_bytes(backbone_id, batch) + B * batch * seq * hidden * wire_bytes
            + batch * num_classes * wire_bytes)


def encode_packet(p: ActivationPacket) -> bytes:
    bid = p.backbone_id.encode()
    buf = io.BytesIO()
    buf.write(_FIXED.pack(PACKET_MAGIC, PACKET_VERSION, p.client_id, len(bid)))
    buf.write(bid)
    buf.write(_DIMS.pack(len(p.blocks), p.batch, p.seq_len, p.hidden, p.num_classes))
    buf.write(np.asarray(p.sample_ids, dtype="<u4").tobytes())
    for b in p.blocks:
        buf.write(np.ascontiguousarray(b, dtype=WIRE_DTYPE).tobytes())
    buf.write(np.ascontiguousarray(p.deviation, dtype=WIRE_DTYPE).tobytes())
    return buf.getvalue()


def decode_packet(blob: bytes, offset: int = 0) -> tuple[ActivationPacket, int]:
    """Parse one packet starting at ``offset``; returns the packet and the end offset."""
    if len(blob) - offset < _FIXED.size:
        raise FormatError("truncated packet header")
    magic, version, client_id, n = _FIXED.unpack_from(blob, offset)
    if magic != PACKET_MAGIC:
        raise FormatError(f"bad packet magic {magic!r}")
    if version != PACKET_VERSION:
        raise FormatError(f"unsupported packet version {version}")
    pos = offset + _FIXED.size
    bid = bytes(blob[pos:pos + n]).decode()
    pos += n
    B, batch, seq, hidden, C = _DIMS.unpack_from(blob, pos)
    pos += _DIMS.size
    end = pos + 4 * batch + 2 * (B * batch * seq * hidden + batch * C)
    if len(blob) < end:
        raise FormatError("truncated packet payload")
    ids = np.frombuffer(blob, "<u4", batch, pos).astype(np.int64)
    pos += 4 * batch
    blocks = []
    step = batch * seq * hidden
    for _ in range(B):
        blocks.append(np.frombuffer(blob, WIRE_DTYPE, step, pos).reshape(batch, seq, hidden).copy())
        pos += 2 * step
    dev = np.frombuffer(blob, WIRE_DTYPE, batch * C, pos).reshape(batch, C).copy()
    pos += 2 * batch * C
    return ActivationPacket(client_id, bid, ids, seq, blocks, dev), pos


def process_batch(backbone: FrozenBackbone, plan: AlignmentPlan, shard: LocalShard,
                  batch_size: int) -> ActivationPacket:
    """Forward the next ``batch_size`` samples and package taps plus deviation.

    Raises ``EndOfData`` once the shard is consumed. The final batch may be
    short.
    """
    batch = shard.next_batch(batch_size)
    logits, taps = forward_with_taps(backbone, batch.tokens, plan.tap_layers[backbone.id])
    dev = compute_deviation(logits, batch.labels)
    return ActivationPacket(
        client_id=shard.client_id,
        backbone_id=backbone.id,
        sample_ids=batch.ids.copy(),
        seq_len=batch.tokens.shape[1],
        blocks=[t.data.astype(WIRE_DTYPE) for t in taps],
        deviation=dev.astype(WIRE_DTYPE),
    )


@dataclass(frozen=True)
class ClientCost:
    flops: float
    upload_bytes: int
    peak_mem_bytes: int
    parameter_bytes: int
    activation_bytes: int
    optimizer_state_bytes: int = 0
    retained_graph_bytes: int = 0
    num_batches: int = 0


def client_cost(backbone, plan: AlignmentPlan, shard, batch_size: int, seq: int,
                wire_bytes: int = 2, param_bytes: int = 8, act_bytes: int = 8) -> ClientCost:
    """Forward-only cost of one single pass over ``shard`` (a shard or a sample count).

    ``backbone`` may be a built backbone or just its config; accounting runs
    at paper scale never materialize the weights.
    """
    n = len(shard) if isinstance(shard, LocalShard) else int(shard)
    c = backbone.config if isinstance(backbone, FrozenBackbone) else backbone
    B = plan.block_count
    full, rest = divmod(n, batch_size)
    sizes = [batch_size] * full + ([rest] if rest else [])
    flops = sum(forward_flops(c, seq, b) for b in sizes)
    upload = sum(packet_bytes(c.id, B, b, seq, c.hidden, c.num_classes, wire_bytes) for b in sizes)
    pbytes = parameter_count(c) * param_bytes
    abytes = activation_bytes(c, seq, min(batch_size, n) if n else 0, B, act_bytes)
    return ClientCost(flops, upload, pbytes + abytes, pbytes, abytes, num_batches=len(sizes))
