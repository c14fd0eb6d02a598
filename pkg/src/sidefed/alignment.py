"""Cross-model alignment: which layers each backbone taps and the shared side width."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneConfig
from .errors import PartitionError, PlanError

STRATEGIES = ("uniform", "shallow", "deep", "random", "explicit")


def partition_layers(num_layers: int, B: int, strategy: str = "uniform", *,
                     seed: int | None = None, explicit=None) -> list[int]:
    """Pick ``B`` tap layers (1-based) out of ``num_layers``.

    ``uniform`` takes the last layer of each of ``B`` equal-width blocks,
    i.e. ``round(i * num_layers / B)`` for ``i = 1..B`` with halves rounded up.
    """
    if not 1 <= B <= num_layers:
        raise PartitionError(f"cannot pick {B} blocks from {num_layers} layers")
    if strategy == "uniform":
        return [math.floor(i * num_layers / B + 0.5) for i in range(1, B + 1)]
    if strategy == "shallow":
        return list(range(1, B + 1))
    if strategy == "deep":
        return list(range(num_layers - B + 1, num_layers + 1))
    if strategy == "random":
        if seed is None:
            raise PartitionError("random strategy needs a seed")
        rng = np.random.default_rng(seed)
        return sorted(int(x) + 1 for x in rng.choice(num_layers, size=B, replace=False))
    if strategy == "explicit":
        layers = [int(x) for x in (explicit or [])]
        if len(layers) != B or sorted(set(layers)) != layers:
            raise PartitionError(f"explicit layers {layers} must be {B} sorted distinct indices")
        if layers[0] < 1 or layers[-1] > num_layers:
            raise PartitionError(f"explicit layers {layers} outside [1, {num_layers}]")
        return layers
    raise PartitionError(f"unknown strategy {strategy!r}")


def auto_side_width(hiddens) -> int:
    """Median of >=3 distinct widths (lower median when even), larger of two, else the only one."""
    sizes = sorted(set(int(h) for h in hiddens))
    if not sizes:
        raise PlanError("no hidden sizes")
    if len(sizes) == 2:
        return sizes[1]
    return sizes[(len(sizes) - 1) // 2]


@dataclass(frozen=True)
class AlignmentPlan:
    block_count: int
    tap_layers: dict[str, tuple[int, ...]]
    d_side: int
    projection_shapes: dict[str, tuple[int, int]]
    num_classes: int
    num_layers: dict[str, int] = field(default_factory=dict)

    @property
    def backbone_ids(self) -> list[str]:
        return list(self.tap_layers)

    def to_dict(self) -> dict:
        return {
            "block_count": self.block_count,
            "d_side": self.d_side,
            "num_classes": self.num_classes,
            "tap_layers": {k: list(v) for k, v in self.tap_layers.items()},
            "projection_shapes": {k: list(v) for k, v in self.projection_shapes.items()},
            "num_layers": dict(self.num_layers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> AlignmentPlan:
        return cls(
            block_count=int(d["block_count"]),
            tap_layers={k: tuple(v) for k, v in d["tap_layers"].items()},
            d_side=int(d["d_side"]),
            projection_shapes={k: tuple(v) for k, v in d["projection_shapes"].items()},
            num_classes=int(d["num_classes"]),
            num_layers=dict(d.get("num_layers", {})),
        )

    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).digest()[:16]

    def to_text(self) -> str:
        lines = [f"blocks: {self.block_count}", f"side width: {self.d_side}",
                 f"classes: {self.num_classes}"]
        for bid, taps in self.tap_layers.items():
            h, d = self.projection_shapes[bid]
            lines.append(f"  {bid}: taps {list(taps)} projection {h}x{d}")
        return "\n".join(lines)

    def with_taps(self, backbone_id: str, layers) -> AlignmentPlan:
        """Same plan with one backbone's tap layers replaced (ablation harness)."""
        layers = tuple(int(x) for x in layers)
        if len(layers) != self.block_count:
            raise PlanError(f"need {self.block_count} taps, got {len(layers)}")
        taps = dict(self.tap_layers)
        taps[backbone_id] = layers
        return AlignmentPlan(self.block_count, taps, self.d_side, dict(self.projection_shapes),
                             self.num_classes, dict(self.num_layers))


def make_plan(configs: list[BackboneConfig], d_side="auto", *, block_count: int | None = None,
              strategy: str = "uniform") -> AlignmentPlan:
    """Build the shared alignment plan for the participating backbone types.

    ``block_count`` defaults to the smallest depth. ``strategy`` is limited
    to the deterministic choices so the plan stays a pure function of its
    inputs.
    """
    if not configs:
        raise PlanError("need at least one backbone")
    if strategy not in ("uniform", "shallow", "deep"):
        raise PlanError(f"plan strategy must be uniform/shallow/deep, got {strategy!r}")
    uniq: dict[str, BackboneConfig] = {}
    for c in configs:
        if c.id in uniq and uniq[c.id] != c:
            raise PlanError(f"backbone id {c.id!r} defined twice with different configs")
        uniq[c.id] = c
    classes = {c.num_classes for c in uniq.values()}
    if len(classes) != 1:
        raise PlanError(f"backbones disagree on num_classes: {sorted(classes)}")
    B = min(c.num_layers for c in uniq.values())
    if block_count is not None:
        if not 1 <= block_count <= B:
            raise PlanError(f"block_count {block_count} outside [1, {B}]")
        B = block_count
    if d_side == "auto" or d_side is None:
        width = auto_side_width(c.hidden for c in uniq.values())
    else:
        width = int(d_side)
        if width < 1:
            raise PlanError(f"side width must be positive, got {width}")
    taps = {bid: tuple(partition_layers(c.num_layers, B, strategy)) for bid, c in uniq.items()}
    shapes = {bid: (c.hidden, width) for bid, c in uniq.items()}
    return AlignmentPlan(B, taps, width, shapes, classes.pop(),
                         {bid: c.num_layers for bid, c in uniq.items()})
