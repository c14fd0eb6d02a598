import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sidefed import backbone as bb
from sidefed import tensor as T
from sidefed.errors import ConfigError


@pytest.fixture(scope="module")
def family():
    return {c.id: bb.build(c) for c in bb.desk_family()}


def test_desk_family_builds_and_runs(family):
    tokens = np.arange(2 * 5).reshape(2, 5) % 64
    for b in family.values():
        logits, taps = bb.forward_with_taps(b, tokens, range(1, b.config.num_layers + 1))
        assert logits.shape == (2, 4)
        assert all(t.shape == (2, 5, b.config.hidden) for t in taps)


def test_same_seed_same_checksum():
    c = bb.desk_family()[0]
    assert bb.build(c).checksum() == bb.build(c).checksum()


def test_different_seed_differs():
    c = bb.desk_family()[0]
    other = bb.BackboneConfig(c.id, c.num_layers, c.hidden, c.heads, init_seed=c.init_seed + 1)
    assert bb.build(c).checksum() != bb.build(other).checksum()


def test_indivisible_heads():
    with pytest.raises(ConfigError):
        bb.build(bb.BackboneConfig("x", 2, 30, 4))


@pytest.mark.parametrize("kw", [dict(num_layers=0), dict(vocab=3, num_classes=4), dict(num_classes=1)])
def test_invalid_configs(kw):
    base = dict(id="x", num_layers=2, hidden=8, heads=2)
    base.update(kw)
    with pytest.raises(ConfigError):
        bb.BackboneConfig(**base).validate()


def test_parameters_frozen(family):
    b = family["small"]
    assert all(not p.requires_grad for p in b.params.values())
    with pytest.raises(ValueError):
        b.params["tok_emb"].data[0, 0] = 1.0


def test_last_tap_is_prehead_state(family):
    b = family["medium"]
    tokens = np.random.default_rng(0).integers(0, 64, size=(3, 7))
    logits, (tap,) = bb.forward_with_taps(b, tokens, [b.config.num_layers])
    with T.no_grad():
        np.testing.assert_array_equal(b.head(tap).data, logits.data)


def test_taps_match_layer_by_layer_reexecution(family):
    b = family["medium"]
    tokens = np.random.default_rng(1).integers(0, 64, size=(2, 6))
    _, taps = bb.forward_with_taps(b, tokens, [2, 5, 8])
    with T.no_grad():
        x = b.embed(tokens)
        seen = {}
        for i in range(1, 9):
            x = b.layer(i, x)
            seen[i] = x.data
    for layer, t in zip([2, 5, 8], taps):
        assert t.data.tobytes() == seen[layer].tobytes()


def test_tap_shape(family):
    tokens = np.zeros((8, 32), dtype=int)
    _, taps = bb.forward_with_taps(family["medium"], tokens, [8])
    assert taps[0].shape == (8, 32, 64)


@pytest.mark.parametrize("taps", [[0], [9], [3, 2], [2, 2]])
def test_bad_taps(family, taps):
    with pytest.raises(IndexError):
        bb.forward_with_taps(family["medium"], np.zeros((1, 4), dtype=int), taps)


def test_no_graph_retained(family):
    logits, taps = bb.forward_with_taps(family["small"], np.zeros((1, 4), dtype=int), [4])
    assert not logits.requires_grad and not taps[0].requires_grad


class TestFlops:
    def test_linear_in_batch(self):
        c = bb.desk_family()[1]
        assert bb.forward_flops(c, 32, 2) == 2 * bb.forward_flops(c, 32, 1)

    def test_matches_traced_matmuls(self, family):
        b = family["medium"]
        with T.trace_matmuls() as rec:
            bb.forward_with_taps(b, np.zeros((1, 32), dtype=int), [8])
        traced = T.traced_flops(rec)
        assert abs(bb.forward_flops(b, 32, 1) - traced) / traced < 0.01

    @given(st.integers(1, 11), st.integers(1, 32))
    def test_monotone_in_depth(self, layers, seq):
        a = bb.BackboneConfig("a", layers, 16, 2)
        b = bb.BackboneConfig("a", layers + 1, 16, 2)
        assert bb.forward_flops(b, seq, 1) > bb.forward_flops(a, seq, 1)

    def test_parameter_count_matches_build(self, family):
        for b in family.values():
            assert bb.parameter_count(b.config) == b.num_parameters()


@given(st.integers(0, 10**6))
def test_taps_depend_only_on_backbone_and_tokens(seed):
    c = bb.BackboneConfig("p", 3, 8, 2, vocab=16, max_seq=8, init_seed=5)
    tokens = np.random.default_rng(seed).integers(0, 16, size=(2, 4))
    b1, b2 = bb.build(c), bb.build(c)
    _, t1 = bb.forward_with_taps(b1, tokens, [1, 3])
    _, t2 = bb.forward_with_taps(b2, tokens, [3])
    assert t1[1].data.tobytes() == t2[0].data.tobytes()
