"""Server-side trainable network.

Per backbone type there is one projection per block mapping that backbone's
hidden size to the shared side width. All backbone types share a ladder of
low-rank adapters joined by learned gates, and one head producing a
class-space correction for the frozen backbone's probabilities.

Training uses only activation taps and the deviation ``softmax(logits) -
onehot(label)``: the loss is the mean squared norm of ``correction +
deviation``, so a perfect correction moves the backbone's probabilities onto
the one-hot label.
"""

from __future__ import annotations

import copy
import io
import json
import struct
from typing import Sequence

import numpy as np

from . import tensor as T
from .alignment import AlignmentPlan
from .backbone import FrozenBackbone, forward_with_taps
from .errors import DataError, DimensionError, FormatError, IdentityError

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1


def compute_deviation(logits, labels) -> np.ndarray:
    """``softmax(logits) - onehot(labels)`` row by row."""
    z = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = z.shape
    if labels.shape != (b,):
        raise DimensionError(f"labels shape {labels.shape} != ({b},)")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"labels outside [0, {c})")
    dev = T.softmax_np(z)
    dev[np.arange(b), labels] -= 1.0
    return dev


class SideNetwork:
    def __init__(self, plan: AlignmentPlan, rank: int = 4, seed: int = 0):
        if not 1 <= rank <= plan.d_side:
            raise ValueError(f"rank {rank} must lie in [1, {plan.d_side}]")
        self.plan = plan
        self.rank = rank
        self.meta: dict = {}  # free-form run metadata carried by checkpoints
        self.params = T.ParamGroup()
        rng = np.random.default_rng(seed)
        d, r, C = plan.d_side, rank, plan.num_classes
        for bid in plan.backbone_ids:
            h = plan.projection_shapes[bid][0]
            for j in range(plan.block_count):
                self._add(f"proj.{bid}.{j}.w", rng.normal(0.0, 1.0 / np.sqrt(h), (h, d)))
                self._add(f"proj.{bid}.{j}.b", np.zeros(d))
        for j in range(plan.block_count):
            self._add(f"ad.{j}.down.w", rng.normal(0.0, 1.0 / np.sqrt(d), (d, r)))
            self._add(f"ad.{j}.down.b", np.zeros(r))
            self._add(f"ad.{j}.up.w", np.zeros((r, d)))
            self._add(f"ad.{j}.up.b", np.zeros(d))
            self._add(f"ad.{j}.gate", np.zeros(1))
        self._add("head.w", rng.normal(0.0, 1.0 / np.sqrt(d), (d, C)))
        self._add("head.b", np.zeros(C))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params.add(name, T.parameter(value, name=name))

    # ------------------------------------------------------------------ views

    @property
    def backbone_ids(self) -> list[str]:
        return sorted({n.split(".")[1] for n in self.params if n.startswith("proj.")})

    def projection_names(self, backbone_id: str) -> list[str]:
        pre = f"proj.{backbone_id}."
        return [n for n in self.params if n.startswith(pre)]

    def shared_names(self) -> list[str]:
        return [n for n in self.params if not n.startswith("proj.")]

    def trainable_for(self, backbone_id: str) -> T.ParamGroup:
        """Parameters touched by a packet from ``backbone_id``."""
        self._require(backbone_id)
        return self.params.select(self.projection_names(backbone_id) + self.shared_names())

    def _require(self, backbone_id: str) -> None:
        if f"proj.{backbone_id}.0.w" not in self.params.params:
            raise IdentityError(f"no projection registered for backbone {backbone_id!r}")

    def copy(self) -> SideNetwork:
        """Independent snapshot including optimizer state."""
        return copy.deepcopy(self)

    def for_device(self, backbone_id: str) -> SideNetwork:
        """What a device downloads: its own projections plus the shared ladder and head."""
        self._require(backbone_id)
        net = self.copy()
        for name in list(net.params.params):
            if name.startswith("proj.") and name.split(".")[1] != backbone_id:
                del net.params.params[name]
                del net.params.state[name]
        return net

    def zero_(self) -> None:
        """Set every adapter weight and the head bias to zero (correction becomes 0)."""
        for name, p in self.params.items():
            if name.startswith("ad.") and not name.endswith("gate") or name == "head.b":
                p.data[...] = 0.0

    def num_parameters(self) -> int:
        return self.params.num_parameters()

    def checksum(self, names: Sequence[str] | None = None) -> str:
        names = sorted(self.params) if names is None else names
        return T.checksum(self.params[n] for n in names)

    # ---------------------------------------------------------------- compute

    def forward(self, backbone_id: str, taps) -> T.Tensor:
        return side_forward(self, backbone_id, taps)

    def loss(self, packet) -> T.Tensor:
        return side_loss(self, packet)

    def step(self, packet, lr: float, betas=(0.9, 0.999), weight_decay: float = 0.0) -> float:
        """One optimizer step on one packet; returns the pre-step loss."""
        group = self.trainable_for(packet.backbone_id)
        group.zero_grad()
        loss = side_loss(self, packet)
        T.backward(loss)
        T.adamw_step(group, lr, betas, weight_decay)
        group.zero_grad()
        return loss.item()


def side_forward(net: SideNetwork, backbone_id: str, taps, skip=()) -> T.Tensor:
    """Correction ``[batch, num_classes]`` for one backbone's block taps.

    Each block's tap is projected, passed through its low-rank adapter and
    mean-pooled over the sequence; a gated ladder folds the blocks together
    (state_j = (1 - g_j) * state_{j-1} + g_j * block_j, state_0 = 0) and the
    head maps the final state to class space. Everything after the GELU is
    affine, so pooling happens right after it; the projection is folded into
    the adapter's down weights. Both rewrites are exact.

    Blocks listed in ``skip`` are bypassed (the ladder state passes through
    unchanged), which is how block ablations are measured.
    """
    net._require(backbone_id)
    plan = net.plan
    if len(taps) != plan.block_count:
        raise DimensionError(f"expected {plan.block_count} taps, got {len(taps)}")
    p = net.params
    h = plan.projection_shapes[backbone_id][0]
    state = None
    for j, tap in enumerate(taps):
        if j in skip:
            continue
        x = tap if isinstance(tap, T.Tensor) else T.Tensor(tap)
        if x.ndim != 3 or x.shape[-1] != h:
            raise DimensionError(f"tap {j} shape {x.shape} does not end in hidden {h}")
        pr, a = f"proj.{backbone_id}.{j}.", f"ad.{j}."
        # (x P + p) D + d == x (P D) + (p D + d): the [seq, d_side] stream is never formed
        w_in = T.matmul(p[pr + "w"], p[a + "down.w"])
        b_in = T.add(T.reshape(T.matmul(T.reshape(p[pr + "b"], (1, -1)), p[a + "down.w"]), (-1,)),
                     p[a + "down.b"])
        u = T.mean(T.gelu(T.add(T.matmul(x, w_in), b_in)), axis=1)
        y = T.add(T.matmul(u, p[a + "up.w"]), p[a + "up.b"])
        g = T.sigmoid(p[a + "gate"])
        if state is None:
            state = T.mul_scalar(y, g)
        else:
            state = T.add(T.mul_scalar(state, T.one_minus(g)), T.mul_scalar(y, g))
    if state is None:
        state = T.Tensor(np.zeros((len(taps[0]), plan.d_side)))
    return T.add(T.matmul(state, p["head.w"]), p["head.b"])


def side_loss(net: SideNetwork, packet) -> T.Tensor:
    """Mean over the batch of ``||correction + deviation||^2``."""
    s = side_forward(net, packet.backbone_id, packet.block_arrays())
    target = T.Tensor(-packet.deviation_array())
    return T.scale(T.mse(s, target), float(s.shape[1]))


def predict_from_taps(net: SideNetwork, backbone_id: str, logits, taps) -> np.ndarray:
    z = logits.data if isinstance(logits, T.Tensor) else np.asarray(logits)
    with T.no_grad():
        s = side_forward(net, backbone_id, taps)
    return np.argmax(T.softmax_np(z) + s.data, axis=-1)


def corrected_predict(net: SideNetwork, backbone: FrozenBackbone, tokens) -> np.ndarray:
    """Class predictions ``argmax(softmax(backbone logits) + correction)``."""
    net._require(backbone.id)
    logits, taps = forward_with_taps(backbone, tokens, net.plan.tap_layers[backbone.id])
    return predict_from_taps(net, backbone.id, logits, taps)


# ------------------------------------------------------------- checkpoint

def dumps_checkpoint(net: SideNetwork) -> bytes:
    """Serialize parameters: header, plan, metadata, then length-prefixed named f64 blobs."""
    buf = io.BytesIO()
    plan_json = json.dumps(net.plan.to_dict(), sort_keys=True).encode()
    meta_json = json.dumps(net.meta, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<H", CHECKPOINT_VERSION))
    buf.write(net.plan.digest())
    buf.write(struct.pack("<I", len(plan_json)))
    buf.write(plan_json)
    buf.write(struct.pack("<I", len(meta_json)))
    buf.write(meta_json)
    buf.write(struct.pack("<HI", net.rank, len(net.params)))
    for name in sorted(net.params):
        data = net.params[name].data
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> SideNetwork:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError("truncated checkpoint")
        out = bytes(view[pos:pos + n])
        pos += n
        return out

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack("<H", take(2))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    digest = take(16)
    (n,) = struct.unpack("<I", take(4))
    plan = AlignmentPlan.from_dict(json.loads(take(n)))
    if plan.digest() != digest:
        raise FormatError("plan digest mismatch")
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(take(n))
    rank, count = struct.unpack("<HI", take(6))
    net = SideNetwork(plan, rank=rank)
    net.meta = meta
    for _ in range(count):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode()
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape)
        if name not in net.params.params or net.params[name].shape != tuple(shape):
            raise FormatError(f"unexpected parameter {name!r} {shape}")
        net.params[name].data[...] = data
    if pos != len(view):
        raise FormatError("trailing bytes after checkpoint")
    return net


def save_checkpoint(net: SideNetwork, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_checkpoint(net))


def load_checkpoint(path) -> SideNetwork:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())
