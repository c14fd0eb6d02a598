"""Frozen toy transformer backbones of heterogeneous depth and width.

A backbone stands in for a pre-trained device model. "Pre-trained" weights
are a deterministic function of ``init_seed``; every parameter is frozen.
Blocks are pre-norm with learned positional embeddings, and the
classification head is final layernorm -> mean-pool over sequence -> linear.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError

# per-element cost charged for a layernorm in the analytic FLOP model
LN_FLOPS_PER_ELEMENT = 5


@dataclass(frozen=True)
class BackboneConfig:
    id: str
    num_layers: int
    hidden: int
    heads: int
    ffn_mult: int = 4
    vocab: int = 64
    max_seq: int = 32
    num_classes: int = 4
    init_seed: int = 0

    def validate(self) -> None:
        if self.num_layers < 1:
            raise ConfigError(f"backbone {self.id!r}: num_layers must be >= 1")
        if self.hidden < 1 or self.heads < 1 or self.hidden % self.heads:
            raise ConfigError(
                f"backbone {self.id!r}: hidden={self.hidden} not divisible by heads={self.heads}")
        if self.ffn_mult < 1 or self.max_seq < 1:
            raise ConfigError(f"backbone {self.id!r}: ffn_mult and max_seq must be >= 1")
        if not self.vocab >= self.num_classes >= 2:
            raise ConfigError(f"backbone {self.id!r}: need vocab >= num_classes >= 2")

    @property
    def ffn(self) -> int:
        return self.ffn_mult * self.hidden

    def to_dict(self) -> dict:
        return asdict(self)


def desk_family(vocab: int = 64, num_classes: int = 4, max_seq: int = 32,
                seed: int = 0) -> list[BackboneConfig]:
    """Three tiers with the depth/width ratios of the small/medium/large device models."""
    return [
        BackboneConfig("small", 4, 32, 4, 4, vocab, max_seq, num_classes, seed + 1),
        BackboneConfig("medium", 8, 64, 4, 4, vocab, max_seq, num_classes, seed + 2),
        BackboneConfig("large", 12, 128, 8, 4, vocab, max_seq, num_classes, seed + 3),
    ]


class FrozenBackbone:
    def __init__(self, config: BackboneConfig, params: dict[str, T.Tensor]):
        self.config = config
        self.params = params

    @property
    def id(self) -> str:
        return self.config.id

    def checksum(self) -> str:
        return T.checksum(self.params[k] for k in sorted(self.params))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    # -- forward pieces, shared by forward_with_taps and tests that re-execute layers

    def embed(self, tokens: np.ndarray) -> T.Tensor:
        p = self.params
        seq = tokens.shape[1]
        return T.add(T.embedding(p["tok_emb"], tokens), T.Tensor(p["pos_emb"].data[:seq]))

    def layer(self, i: int, x: T.Tensor) -> T.Tensor:
        """Apply transformer layer ``i`` (1-based) to the residual stream ``x``."""
        c = self.config
        p = self.params
        pre = f"l{i}."
        b, s, h = x.shape
        nh, dh = c.heads, c.hidden // c.heads

        a = T.layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = T.add(T.matmul(a, p[pre + "qkv.w"]), p[pre + "qkv.b"])
        qkv = T.transpose(T.reshape(qkv, (b, s, 3, nh, dh)), (2, 0, 3, 1, 4))
        q = T.Tensor(qkv.data[0])
        k = T.Tensor(qkv.data[1])
        v = T.Tensor(qkv.data[2])
        scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
        ctx = T.matmul(T.softmax(scores), v)
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, s, h))
        x = T.add(x, T.add(T.matmul(ctx, p[pre + "out.w"]), p[pre + "out.b"]))

        f = T.layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        f = T.gelu(T.add(T.matmul(f, p[pre + "ff1.w"]), p[pre + "ff1.b"]))
        f = T.add(T.matmul(f, p[pre + "ff2.w"]), p[pre + "ff2.b"])
        return T.add(x, f)

    def head(self, x: T.Tensor) -> T.Tensor:
        p = self.params
        z = T.mean(T.layernorm(x, p["lnf.g"], p["lnf.b"]), axis=1)
        return T.add(T.matmul(z, p["cls.w"]), p["cls.b"])


def build(config: BackboneConfig) -> FrozenBackbone:
    """Deterministically initialize a frozen backbone from ``config.init_seed``."""
    config.validate()
    rng = np.random.default_rng(config.init_seed)
    h, f = config.hidden, config.ffn

    def normal(shape, std):
        return T.Tensor(rng.normal(0.0, std, size=shape))

    params: dict[str, T.Tensor] = {
        "tok_emb": normal((config.vocab, h), 1.0),
        "pos_emb": normal((config.max_seq, h), 0.1),
    }
    for i in range(1, config.num_layers + 1):
        pre = f"l{i}."
        params[pre + "ln1.g"] = T.Tensor(np.ones(h))
        params[pre + "ln1.b"] = T.Tensor(np.zeros(h))
        params[pre + "qkv.w"] = normal((h, 3 * h), 1.0 / np.sqrt(h))
        params[pre + "qkv.b"] = T.Tensor(np.zeros(3 * h))
        params[pre + "out.w"] = normal((h, h), 0.5 / np.sqrt(h))
        params[pre + "out.b"] = T.Tensor(np.zeros(h))
        params[pre + "ln2.g"] = T.Tensor(np.ones(h))
        params[pre + "ln2.b"] = T.Tensor(np.zeros(h))
        params[pre + "ff1.w"] = normal((h, f), 1.0 / np.sqrt(h))
        params[pre + "ff1.b"] = T.Tensor(np.zeros(f))
        params[pre + "ff2.w"] = normal((f, h), 0.5 / np.sqrt(f))
        params[pre + "ff2.b"] = T.Tensor(np.zeros(h))
    params["lnf.g"] = T.Tensor(np.ones(h))
    params["lnf.b"] = T.Tensor(np.zeros(h))
    params["cls.w"] = normal((h, config.num_classes), 0.1 / np.sqrt(h))
    params["cls.b"] = T.Tensor(np.zeros(config.num_classes))
    for name, p in params.items():
        p.name = name
        p.data.setflags(write=False)
    return FrozenBackbone(config, params)


def forward_with_taps(b: FrozenBackbone, tokens, tap_layers) -> tuple[T.Tensor, list[T.Tensor]]:
    """Run the backbone forward and return ``(logits, taps)``.

    ``taps[j]`` is the residual stream after layer ``tap_layers[j]``. No
    gradient graph is built.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise DimensionError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    c = b.config
    if tokens.shape[1] > c.max_seq:
        raise DimensionError(f"seq {tokens.shape[1]} exceeds max_seq {c.max_seq}")
    taps_wanted = list(tap_layers)
    if any(t < 1 or t > c.num_layers for t in taps_wanted):
        raise IndexError(f"tap layers {taps_wanted} outside [1, {c.num_layers}]")
    if sorted(set(taps_wanted)) != taps_wanted:
        raise IndexError(f"tap layers {taps_wanted} must be sorted and distinct")
    wanted = set(taps_wanted)
    taps = []
    with T.no_grad():
        x = b.embed(tokens)
        for i in range(1, c.num_layers + 1):
            x = b.layer(i, x)
            if i in wanted:
                taps.append(x)
        logits = b.head(x)
    return logits, taps


def forward_flops(b: FrozenBackbone | BackboneConfig, seq: int, batch: int) -> float:
    """Analytic forward FLOPs for ``batch`` sequences of length ``seq``.

    Matmuls count 2*m*k*n, including both seq^2 attention products.
    Layernorms count ``LN_FLOPS_PER_ELEMENT`` per element; positional add
    and mean-pool one per element. Softmax, GELU, bias and residual adds are
    not charged.
    """
    c = b.config if isinstance(b, FrozenBackbone) else b
    h, f, s = c.hidden, c.ffn, seq
    if s > c.max_seq:
        raise DimensionError(f"seq {s} exceeds max_seq {c.max_seq}")
    per_layer = (
        2 * LN_FLOPS_PER_ELEMENT * s * h
        + 2 * s * h * 3 * h
        + 2 * s * s * h * 2
        + 2 * s * h * h
        + 2 * s * h * f * 2
    )
    embed = s * h
    head = LN_FLOPS_PER_ELEMENT * s * h + s * h + 2 * h * c.num_classes
    return float(batch * (embed + c.num_layers * per_layer + head))


def parameter_count(c: BackboneConfig) -> int:
    h, f = c.hidden, c.ffn
    per_layer = 4 * h + (h * 3 * h + 3 * h) + (h * h + h) + (h * f + f) + (f * h + h)
    return c.vocab * h + c.max_seq * h + c.num_layers * per_layer + 2 * h + h * c.num_classes + c.num_classes


def activation_bytes(c: BackboneConfig, seq: int, batch: int, taps: int, elem_bytes: int) -> int:
    """Live activation footprint of one forward batch with ``taps`` retained outputs."""
    bsh = batch * seq * c.hidden
    working = max(3 * bsh + 2 * batch * c.heads * seq * seq, 2 * batch * seq * c.ffn)
    return (taps * bsh + bsh + working) * elem_bytes
