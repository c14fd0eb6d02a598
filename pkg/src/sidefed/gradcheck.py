"""Finite-difference checks of every differentiable op and of the side-network loss."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .alignment import make_plan
from .backbone import BackboneConfig
from .client import ActivationPacket
from .sidenet import SideNetwork, compute_deviation, side_loss

EPS = 1e-6


def _params(rng, **shapes) -> dict[str, T.Tensor]:
    return {k: T.parameter(rng.normal(0.0, 0.5, s), name=k) for k, s in shapes.items()}


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable[[], T.Tensor], dict]]:
    cases = {}

    p = _params(rng, a=(3, 4), b=(4,))
    cases["add"] = (lambda p=p: T.total(T.mul(T.add(p["a"], p["b"]), T.add(p["a"], p["b"]))), p)

    p = _params(rng, a=(3, 4), b=(3, 4))
    cases["sub_mul"] = (lambda p=p: T.total(T.mul(T.sub(p["a"], p["b"]), p["a"])), p)

    p = _params(rng, a=(2, 3, 4), w=(4, 5))
    cases["matmul"] = (lambda p=p: T.total(T.gelu(T.matmul(p["a"], p["w"]))), p)

    p = _params(rng, a=(2, 3, 4), b=(2, 4, 3))
    cases["batched_matmul"] = (lambda p=p: T.total(T.sigmoid(T.matmul(p["a"], p["b"]))), p)

    p = _params(rng, x=(2, 5, 6), g=(6,), b=(6,))
    cases["layernorm"] = (lambda p=p: T.total(T.mul(T.layernorm(p["x"], p["g"], p["b"]),
                                                     T.layernorm(p["x"], p["g"], p["b"]))), p)

    p = _params(rng, x=(3, 5))
    w = rng.normal(size=(3, 5))
    cases["softmax"] = (lambda p=p: T.total(T.mul(T.softmax(p["x"]), T.Tensor(w))), p)

    p = _params(rng, x=(4, 3))
    labels = np.array([0, 2, 1, 2])
    cases["cross_entropy"] = (lambda p=p: T.cross_entropy(p["x"], labels), p)

    p = _params(rng, x=(4, 3), t=(4, 3))
    cases["mse"] = (lambda p=p: T.mse(p["x"], p["t"]), p)

    p = _params(rng, e=(7, 3))
    ids = np.array([[0, 3, 3], [6, 1, 0]])
    cases["embedding_mean"] = (lambda p=p: T.total(T.gelu(T.mean(T.embedding(p["e"], ids), axis=1))), p)

    p = _params(rng, x=(2, 3, 4), s=(1,))
    cases["gate"] = (lambda p=p: T.total(T.gelu(T.add(T.mul_scalar(p["x"], T.sigmoid(p["s"])),
                                                      T.mul_scalar(p["x"], T.one_minus(T.sigmoid(p["s"])))))), p)

    p = _params(rng, x=(2, 3, 4))
    cases["transpose_reshape"] = (lambda p=p: T.total(T.gelu(T.reshape(T.transpose(p["x"], (0, 2, 1)), (2, 12)))),
                                  p)

    cfgs = [BackboneConfig("a", 2, 6, 2, vocab=8, max_seq=4, num_classes=3),
            BackboneConfig("b", 3, 4, 2, vocab=8, max_seq=4, num_classes=3)]
    plan = make_plan(cfgs, 5)
    net = SideNetwork(plan, rank=2, seed=1)
    for _, prm in net.params.items():
        prm.data[...] = rng.normal(0.0, 0.5, prm.shape)
    logits = rng.normal(size=(3, 3))
    packet = ActivationPacket(0, "b", np.arange(3), 4, [rng.normal(size=(3, 4, 4)) for _ in range(2)],
                              compute_deviation(logits, np.array([0, 1, 2])))
    packet._f64 = [b.astype(np.float64) for b in packet.blocks]
    cases["side_loss"] = (lambda: side_loss(net, packet), dict(net.trainable_for("b").items()))
    return cases


def gradient_suite(seed: int = 0, eps: float = EPS) -> dict[str, float]:
    """Relative error per case; the suite passes when every value is below 1e-5."""
    rng = np.random.default_rng(seed)
    return {name: T.grad_check(f, params, eps=eps) for name, (f, params) in _cases(rng).items()}
