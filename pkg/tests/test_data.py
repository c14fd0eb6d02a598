import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sidefed.data import (LocalShard, PartitionSpec, SyntheticTask, bayes_predict, count_predict,
                          dumps_dataset, generate, heterogeneity, label_shares, loads_dataset, partition)
from sidefed.errors import DataError, EndOfData, FormatError, PartitionError


def test_no_signal_is_chance():
    task = SyntheticTask(signal=0.0, seed=3)
    d = generate(task, 2000)
    acc = (bayes_predict(task, d.tokens) == d.labels).mean()
    assert abs(acc - 0.25) <= 0.03


def test_strong_signal_counting_oracle():
    task = SyntheticTask(signal=0.9, seed=3)
    d = generate(task, 500)
    assert (count_predict(task, d.tokens) == d.labels).mean() > 0.95


def test_default_task_is_learnable_but_not_trivial():
    task = SyntheticTask(seed=0)
    d = generate(task, 2000)
    acc = (bayes_predict(task, d.tokens) == d.labels).mean()
    assert 0.85 < acc < 1.0


def test_deterministic():
    a, b = generate(SyntheticTask(seed=9), 50), generate(SyntheticTask(seed=9), 50)
    assert dumps_dataset(a) == dumps_dataset(b)
    assert dumps_dataset(generate(SyntheticTask(seed=9), 50, "eval")) != dumps_dataset(a)


def test_invalid_task():
    with pytest.raises(DataError):
        generate(SyntheticTask(vocab=4, num_classes=4, subset_size=2), 10)


def test_dataset_roundtrip():
    d = generate(SyntheticTask(seed=2), 30)
    back = loads_dataset(dumps_dataset(d))
    assert (back.tokens == d.tokens).all() and (back.labels == d.labels).all()
    with pytest.raises(FormatError):
        loads_dataset(dumps_dataset(d)[:-1])


class TestPartition:
    def test_iid_limit(self):
        d = generate(SyntheticTask(seed=4), 2000)
        shards = partition(d, PartitionSpec(5, 1e6, seed=1))
        glob = d.label_histogram() / len(d)
        assert np.abs(label_shares(shards, 4) - glob).max() <= 0.02

    def test_skew_increases_heterogeneity(self):
        d = generate(SyntheticTask(seed=4), 600)
        skew = heterogeneity(partition(d, PartitionSpec(6, 0.1, seed=1)), 4)["mean_tv"]
        iid = heterogeneity(partition(d, PartitionSpec(6, 1e6, seed=1)), 4)["mean_tv"]
        assert skew > iid + 0.2

    def test_deterministic(self):
        d = generate(SyntheticTask(seed=4), 100)
        a = partition(d, PartitionSpec(4, 0.5, seed=2))
        b = partition(d, PartitionSpec(4, 0.5, seed=2))
        assert all((x.data.ids == y.data.ids).all() for x, y in zip(a, b))

    @given(st.integers(1, 8), st.floats(0.05, 100.0), st.integers(0, 1000))
    def test_disjoint_cover(self, k, alpha, seed):
        d = generate(SyntheticTask(seed=1), 80)
        shards = partition(d, PartitionSpec(k, alpha, seed))
        ids = np.concatenate([s.data.ids for s in shards])
        assert sorted(ids.tolist()) == list(range(80))
        assert all(len(s) > 0 for s in shards)

    def test_more_clients_than_samples(self):
        with pytest.raises(PartitionError):
            partition(generate(SyntheticTask(seed=1), 4), PartitionSpec(5, 1.0))

    @pytest.mark.parametrize("spec", [PartitionSpec(0, 1.0), PartitionSpec(2, 0.0)])
    def test_bad_spec(self, spec):
        with pytest.raises(PartitionError):
            partition(generate(SyntheticTask(seed=1), 10), spec)


def test_shard_cursor():
    s = LocalShard(0, generate(SyntheticTask(seed=1), 10))
    assert [len(s.next_batch(4)) for _ in range(3)] == [4, 4, 2]
    with pytest.raises(EndOfData):
        s.next_batch(4)
    s.reset()
    assert s.remaining == 10 and s.num_batches(4) == 3


def test_max_share_grows_with_skew():
    d = generate(SyntheticTask(seed=6), 1000)
    means = {a: np.mean([heterogeneity(partition(d, PartitionSpec(10, a, s)), 4)["mean_max_share"]
                         for s in range(10)]) for a in (0.1, 1.0, 10.0)}
    assert means[0.1] > means[1.0] > means[10.0]


def test_total_variation_non_increasing_in_alpha():
    d = generate(SyntheticTask(seed=6), 600)
    tv = [np.mean([heterogeneity(partition(d, PartitionSpec(6, a, s)), 4)["mean_tv"] for s in range(20)])
          for a in (0.1, 1.0, 10.0)]
    assert tv[0] >= tv[1] >= tv[2]
