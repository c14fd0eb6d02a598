"""Synthetic sequence classification and Dirichlet label-skew partitioning."""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, EndOfData, FormatError, PartitionError

DATASET_MAGIC = b"SFDS"
DATASET_VERSION = 1


@dataclass(frozen=True)
class SyntheticTask:
    """Each class raises the probability of its own disjoint token subset.

    A position draws from the class subset with probability ``signal`` and
    from the whole vocabulary otherwise. ``signal=0`` carries no label
    information.
    """

    vocab: int = 32
    num_classes: int = 4
    seq: int = 16
    signal: float = 0.3
    subset_size: int | None = None
    seed: int = 0

    @property
    def k(self) -> int:
        return self.subset_size or max(1, self.vocab // (2 * self.num_classes))

    def validate(self) -> None:
        if self.num_classes < 2 or self.vocab < self.num_classes * self.k:
            raise DataError("need num_classes >= 2 and vocab >= num_classes * subset_size")
        if not 0.0 <= self.signal <= 1.0:
            raise DataError(f"signal {self.signal} outside [0, 1]")
        if self.seq < 1:
            raise DataError("seq must be >= 1")

    def token_probs(self) -> np.ndarray:
        """``[num_classes, vocab]`` per-position token distribution of each class."""
        p = np.full((self.num_classes, self.vocab), (1.0 - self.signal) / self.vocab)
        for c in range(self.num_classes):
            p[c, c * self.k:(c + 1) * self.k] += self.signal / self.k
        return p


@dataclass
class Dataset:
    tokens: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    num_classes: int
    vocab: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> Dataset:
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.tokens[index], self.labels[index], self.ids[index],
                       self.num_classes, self.vocab)

    def label_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def _split_seed(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(label.encode())])


def generate(task: SyntheticTask, n: int, split: str = "train") -> Dataset:
    """``n`` iid samples with uniform labels; deterministic in ``(task.seed, split)``."""
    task.validate()
    if n < task.num_classes:
        raise DataError(f"n={n} must be >= num_classes={task.num_classes}")
    rng = _split_seed(task.seed, split)
    labels = rng.integers(0, task.num_classes, size=n)
    from_subset = rng.random((n, task.seq)) < task.signal
    uniform = rng.integers(0, task.vocab, size=(n, task.seq))
    within = rng.integers(0, task.k, size=(n, task.seq))
    tokens = np.where(from_subset, labels[:, None] * task.k + within, uniform)
    return Dataset(tokens.astype(np.int64), labels.astype(np.int64),
                   np.arange(n, dtype=np.int64), task.num_classes, task.vocab)


def bayes_predict(task: SyntheticTask, tokens) -> np.ndarray:
    """Maximum-likelihood class under the generating distribution (uniform prior)."""
    logp = np.log(task.token_probs())
    tokens = np.asarray(tokens)
    scores = logp[:, tokens].sum(axis=-1)
    return np.argmax(scores, axis=0)


def count_predict(task: SyntheticTask, tokens) -> np.ndarray:
    """Class whose token subset occurs most often."""
    tokens = np.asarray(tokens)
    owner = np.minimum(tokens // task.k, task.num_classes)
    counts = np.stack([(owner == c).sum(axis=1) for c in range(task.num_classes)], axis=1)
    return np.argmax(counts, axis=1)


# ------------------------------------------------------------- partitioning

@dataclass(frozen=True)
class PartitionSpec:
    num_clients: int
    alpha: float
    seed: int = 0

    def validate(self) -> None:
        if self.num_clients < 1:
            raise PartitionError("num_clients must be >= 1")
        if not self.alpha > 0:
            raise PartitionError(f"alpha must be > 0, got {self.alpha}")


@dataclass
class LocalShard:
    """One client's samples plus a read cursor; each sample is read once."""

    client_id: int
    data: Dataset
    cursor: int = 0

    def __len__(self) -> int:
        return len(self.data)

    @property
    def exhausted(self) -> bool:
        return self.cursor >= len(self.data)

    @property
    def remaining(self) -> int:
        return len(self.data) - self.cursor

    def next_batch(self, batch_size: int) -> Dataset:
        if self.exhausted:
            raise EndOfData(f"client {self.client_id} shard exhausted")
        lo, hi = self.cursor, min(self.cursor + batch_size, len(self.data))
        self.cursor = hi
        return self.data.subset(np.arange(lo, hi))

    def num_batches(self, batch_size: int) -> int:
        return -(-len(self.data) // batch_size)

    def reset(self) -> None:
        self.cursor = 0


def partition(dataset: Dataset, spec: PartitionSpec, max_retries: int = 100) -> list[LocalShard]:
    """Split ``dataset`` across clients with per-class Dirichlet(alpha) proportions.

    For each class, client proportions are drawn from a symmetric Dirichlet
    and the (shuffled) class members are cut accordingly. Draws that leave
    a client empty are repeated up to ``max_retries`` times.
    """
    spec.validate()
    K = spec.num_clients
    if len(dataset) < K:
        raise PartitionError(f"{len(dataset)} samples cannot cover {K} clients")
    rng = _split_seed(spec.seed, "partition")
    by_class = [np.flatnonzero(dataset.labels == c) for c in range(dataset.num_classes)]
    for _ in range(max_retries):
        members: list[list[np.ndarray]] = [[] for _ in range(K)]
        for idx in by_class:
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            props = rng.dirichlet(np.full(K, spec.alpha))
            cuts = np.floor(np.cumsum(props)[:-1] * idx.size + 0.5).astype(np.int64)
            for k, part in enumerate(np.split(idx, cuts)):
                members[k].append(part)
        sizes = [sum(p.size for p in m) for m in members]
        if min(sizes) > 0:
            break
    else:
        raise PartitionError(f"a client received no samples after {max_retries} draws")
    shards = []
    for k, parts in enumerate(members):
        index = rng.permutation(np.concatenate(parts))
        shards.append(LocalShard(k, dataset.subset(index)))
    return shards


def label_shares(shards: list[LocalShard], num_classes: int) -> np.ndarray:
    """``[clients, classes]`` label distribution per shard."""
    rows = [np.bincount(s.data.labels, minlength=num_classes) / max(len(s), 1) for s in shards]
    return np.array(rows)


def heterogeneity(shards: list[LocalShard], num_classes: int) -> dict[str, float]:
    """Mean total-variation distance to the pooled label distribution, and mean max share."""
    shares = label_shares(shards, num_classes)
    pooled = np.bincount(np.concatenate([s.data.labels for s in shards]), minlength=num_classes)
    pooled = pooled / pooled.sum()
    tv = 0.5 * np.abs(shares - pooled).sum(axis=1)
    return {"mean_tv": float(tv.mean()), "mean_max_share": float(shares.max(axis=1).mean())}


# ------------------------------------------------------------ binary format

def dumps_dataset(ds: Dataset) -> bytes:
    n, seq = ds.tokens.shape
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<HIHHI", DATASET_VERSION, n, seq, ds.num_classes, ds.vocab))
    buf.write(ds.ids.astype("<u4").tobytes())
    buf.write(ds.labels.astype("<u2").tobytes())
    buf.write(ds.tokens.astype("<u4").tobytes())
    return buf.getvalue()


def loads_dataset(blob: bytes) -> Dataset:
    head = struct.calcsize("<HIHHI")
    if blob[:4] != DATASET_MAGIC:
        raise FormatError("bad dataset magic")
    version, n, seq, C, V = struct.unpack("<HIHHI", blob[4:4 + head])
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    pos = 4 + head
    expected = pos + n * 4 + n * 2 + n * seq * 4
    if len(blob) != expected:
        raise FormatError(f"dataset blob is {len(blob)} bytes, expected {expected}")
    ids = np.frombuffer(blob, "<u4", n, pos).astype(np.int64)
    pos += 4 * n
    labels = np.frombuffer(blob, "<u2", n, pos).astype(np.int64)
    pos += 2 * n
    tokens = np.frombuffer(blob, "<u4", n * seq, pos).astype(np.int64).reshape(n, seq)
    return Dataset(tokens, labels, ids, C, V)


def save_dataset(ds: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return loads_dataset(fh.read())
