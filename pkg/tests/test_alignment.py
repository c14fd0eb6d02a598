import pytest
from hypothesis import given
from hypothesis import strategies as st

from sidefed.alignment import AlignmentPlan, auto_side_width, make_plan, partition_layers
from sidefed.backbone import BackboneConfig
from sidefed.errors import PartitionError, PlanError


def test_every_other_layer_of_24():
    assert partition_layers(24, 12) == list(range(2, 25, 2))


def test_full_depth():
    assert partition_layers(12, 12) == list(range(1, 13))


def test_stride_three():
    assert partition_layers(36, 12) == list(range(3, 37, 3))


def test_shallow_deep_random_explicit():
    assert partition_layers(8, 3, "shallow") == [1, 2, 3]
    assert partition_layers(8, 3, "deep") == [6, 7, 8]
    r = partition_layers(8, 3, "random", seed=4)
    assert r == partition_layers(8, 3, "random", seed=4) and len(set(r)) == 3
    assert partition_layers(8, 2, "explicit", explicit=[3, 8]) == [3, 8]


@pytest.mark.parametrize("args", [(4, 5), (4, 0)])
def test_bad_block_count(args):
    with pytest.raises(PartitionError):
        partition_layers(*args)


def test_random_needs_seed():
    with pytest.raises(PartitionError):
        partition_layers(8, 3, "random")


@given(st.integers(1, 64).flatmap(lambda L: st.tuples(st.just(L), st.integers(1, L))))
def test_uniform_invariants(args):
    L, B = args
    taps = partition_layers(L, B)
    assert len(taps) == B
    assert all(a < b for a, b in zip(taps, taps[1:]))
    assert taps[-1] == L and taps[0] >= 1


def test_median_width():
    assert auto_side_width([768, 1024, 2048]) == 1024


def test_larger_of_two():
    assert auto_side_width([768, 1024]) == 1024


def test_single_backbone_plan():
    plan = make_plan([BackboneConfig("rb", 12, 768, 12, num_classes=2)])
    assert plan.block_count == 12 and plan.d_side == 768
    assert plan.tap_layers["rb"] == tuple(range(1, 13))


def test_heterogeneous_plan():
    cfgs = [BackboneConfig("s", 4, 32, 4), BackboneConfig("m", 8, 64, 4), BackboneConfig("l", 12, 128, 8)]
    plan = make_plan(cfgs)
    assert plan.block_count == 4 and plan.d_side == 64
    assert plan.tap_layers == {"s": (1, 2, 3, 4), "m": (2, 4, 6, 8), "l": (3, 6, 9, 12)}
    assert plan.projection_shapes == {"s": (32, 64), "m": (64, 64), "l": (128, 64)}


def test_mismatched_classes():
    with pytest.raises(PlanError):
        make_plan([BackboneConfig("a", 2, 8, 2, num_classes=3), BackboneConfig("b", 2, 8, 2, num_classes=4)])


def test_block_count_bound():
    with pytest.raises(PlanError):
        make_plan([BackboneConfig("a", 2, 8, 2)], block_count=3)


def test_plan_roundtrip_and_digest():
    plan = make_plan([BackboneConfig("a", 4, 8, 2), BackboneConfig("b", 6, 16, 2)], 12)
    again = AlignmentPlan.from_dict(plan.to_dict())
    assert again == plan and again.digest() == plan.digest()
    assert plan.with_taps("b", [1, 2, 3, 6]).digest() != plan.digest()


def test_with_taps_length_checked():
    plan = make_plan([BackboneConfig("a", 4, 8, 2)])
    with pytest.raises(PlanError):
        plan.with_taps("a", [1, 2])
