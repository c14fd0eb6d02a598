"""Dense float64 tensors with reverse-mode autodiff.

Only tensors created with ``requires_grad=True`` (parameters) or derived from
them take part in the gradient graph. Frozen tensors never receive a ``grad``
buffer, so the frozen backbones can share this module without any risk of
being updated.

Broadcasting is limited to trailing-shape operands (bias, positional table)
and a leading batch dimension on matmul.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DimensionError, NumericError, StateError

_GRAD_ENABLED = True
_MATMUL_TRACE: list[list[tuple[int, int, int, int]]] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        return sub(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block, even for trainable inputs."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def trace_matmuls() -> Iterator[list[tuple[int, int, int, int]]]:
    """Record ``(batch, m, k, n)`` for every matmul executed inside the block."""
    record: list[tuple[int, int, int, int]] = []
    _MATMUL_TRACE.append(record)
    try:
        yield record
    finally:
        _MATMUL_TRACE.remove(record)


def traced_flops(record: Sequence[tuple[int, int, int, int]]) -> int:
    return sum(2 * b * m * k * n for b, m, k, n in record)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    return g


def _trailing(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _trailing(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, _sum_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _trailing(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -_sum_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def mul_scalar(a: Tensor, s: Tensor) -> Tensor:
    """Multiply ``a`` by a one-element tensor, differentiable in both."""
    if s.size != 1:
        raise DimensionError(f"mul_scalar: gate must have one element, got {s.shape}")
    v = s.data.reshape(-1)[0]
    return _make(
        a.data * v,
        (a, s),
        lambda g: (g * v, np.array(np.sum(g * a.data)).reshape(s.shape)),
    )


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _make(y, (a,), lambda g: (g * y * (1.0 - y),))


def one_minus(a: Tensor) -> Tensor:
    return _make(1.0 - a.data, (a,), lambda g: (-g,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    t = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    y = 0.5 * x * (1.0 + t)

    def bw(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _make(y, (a,), bw)


# ------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank>=2 operands, got {a.shape} and {b.shape}")
    m, k = a.shape[-2:]
    k2, n = b.shape[-2:]
    if k != k2:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # one flat GEMM instead of numpy's per-matrix loop
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        out = a.data @ b.data
    if _MATMUL_TRACE:
        batch = int(np.prod(a.shape[:-2], dtype=np.int64))
        for rec in _MATMUL_TRACE:
            rec.append((batch, m, k, n))

    def bw(g):
        ga = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, n) @ b.data.T).reshape(a.shape)
            else:
                ga = g @ np.swapaxes(b.data, -1, -2)
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), bw)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape {old} -> {tuple(shape)}: {exc}") from None
    return _make(out, (a,), lambda g: (g.reshape(old),))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"embedding ids outside [0, {table.shape[0]})")

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), bw)


# ---------------------------------------------------------------- reductions

def mean(a: Tensor, axis: int) -> Tensor:
    n = a.shape[axis]
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape) / n,)

    return _make(a.data.mean(axis=axis), (a,), bw)


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: affine params must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, _sum_to(g * xhat, (d,)), _sum_to(g, (d,))

    return _make(xhat * gamma.data + beta.data, (x, gamma, beta), bw)


def softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


def softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[b, C]``."""
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} != ({b},)")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -logp[np.arange(b), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (g * p / b,)

    return _make(np.array(loss), (logits,), bw)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise DimensionError(f"mse: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    n = diff.size
    return _make(np.array((diff * diff).mean()), (pred, target),
                 lambda g: (2.0 * g * diff / n, -2.0 * g * diff / n))


# ------------------------------------------------------------------ backward

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every trainable leaf."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # trainable leaf
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- optimizer

class ParamGroup:
    """Named trainable tensors plus AdamW moment buffers."""

    def __init__(self, params: Mapping[str, Tensor] | None = None):
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, dict] = {}
        self.step_count = 0
        for name, p in (params or {}).items():
            self.add(name, p)

    def add(self, name: str, p: Tensor) -> None:
        if not p.requires_grad:
            raise StateError(f"parameter {name!r} is frozen")
        if name in self.params:
            raise StateError(f"duplicate parameter {name!r}")
        self.params[name] = p
        self.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def select(self, names) -> ParamGroup:
        """A view over a subset of parameters sharing tensors and optimizer state."""
        view = ParamGroup()
        for n in names:
            view.params[n] = self.params[n]
            view.state[n] = self.state[n]
        return view

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


def adamw_step(params: ParamGroup, lr: float, betas: tuple[float, float] = (0.9, 0.999),
               weight_decay: float = 0.0, eps: float = 1e-8) -> None:
    """One AdamW update (decoupled weight decay) on every parameter in ``params``."""
    b1, b2 = betas
    for name, p in params.params.items():
        if p.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
        if not np.isfinite(p.grad).all():
            raise NumericError(f"non-finite gradient for {name!r}")
    for name, p in params.params.items():
        st = params.state[name]
        st["t"] += 1
        t = st["t"]
        g = p.grad
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
        mhat = st["m"] / (1.0 - b1**t)
        vhat = st["v"] / (1.0 - b2**t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
    params.step_count += 1


# ------------------------------------------------------------- grad check

def grad_check(f: Callable[[], Tensor], params: ParamGroup | Mapping[str, Tensor],
               eps: float = 1e-5, max_entries: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max over parameters of the relative error between backprop and central differences.

    ``f`` must rebuild the scalar loss from the current parameter values on
    every call. The error for one parameter is ``|g - g_fd| / max(|g|, |g_fd|)``
    in the 2-norm. ``max_entries`` limits finite differences to a random
    subset of entries per parameter.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-4]")
    items = params.items() if isinstance(params, ParamGroup) else params.items()
    items = list(items)
    for _, p in items:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite loss in grad_check")
    backward(loss)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for _, p in items:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError("non-finite loss in grad_check")
                numeric[j] = (fp - fm) / (2 * eps)
        a = analytic.reshape(-1)[idx]
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-10)
        worst = max(worst, float(np.linalg.norm(a - numeric) / denom))
        p.grad = None
    return worst


def checksum(arrays) -> str:
    """Hex digest over the raw bytes of a sequence of arrays or tensors."""

    h = hashlib.sha256()
    for a in arrays:
        data = a.data if isinstance(a, Tensor) else np.asarray(a)
        h.update(str(data.shape).encode())
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()
