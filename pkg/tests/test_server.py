import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sidefed import backbone as bb
from sidefed.alignment import make_plan
from sidefed.client import process_batch
from sidefed.data import LocalShard, SyntheticTask, generate
from sidefed.errors import PhaseError, ProtocolError
from sidefed.server import (DONE, STANDALONE, STREAMING, ActivationCache, EvalSet, ServerState,
                            TrainSettings, dumps_record, evaluate_net, load_record, loads_record)
from sidefed.sidenet import SideNetwork, corrected_predict

from conftest import tiny_backbones

TASK = SyntheticTask(vocab=16, num_classes=3, seq=8, signal=0.5, seed=5)


@pytest.fixture(scope="module")
def world():
    cfgs = tiny_backbones()
    backbones = {k: bb.build(c) for k, c in cfgs.items()}
    return backbones, make_plan(list(cfgs.values()))


def packets(world, client_id, backbone_id, n, batch=4, seed=0):
    backbones, plan = world
    data = generate(SyntheticTask(vocab=16, num_classes=3, seq=8, signal=0.5, seed=seed), n)
    shard = LocalShard(client_id, data)
    out = []
    while not shard.exhausted:
        out.append(process_batch(backbones[backbone_id], plan, shard, batch))
    return out


def server(world, clients=(0,), **kw):
    _, plan = world
    return ServerState(SideNetwork(plan, rank=2, seed=0), clients, TrainSettings(lr=1e-2, **kw))


class TestArrival:
    def test_single_packet(self, world):
        s = server(world)
        s.on_packet(packets(world, 0, "wide", 4)[0])
        assert s.arrival_steps == 1 and len(s.cache) == 1

    def test_interleaved_counts(self, world):
        s = server(world, (0, 1), k_arrival=2)
        a, b = packets(world, 0, "wide", 12), packets(world, 1, "narrow", 8, seed=1)
        order = [a[0], b[0], a[1], b[1], a[2]]
        for p in order:
            s.on_packet(p)
        assert s.arrival_steps == 2 * len(order) and s.step == s.arrival_steps
        steps = [e["client_id"] for e in s.events if e["event"] == "arrival_step"]
        assert steps == [p.client_id for p in order for _ in range(2)]

    def test_arrival_step_lowers_loss(self, world):
        s = server(world)
        p = packets(world, 0, "wide", 8, batch=8)[0]
        s.net.step(p, lr=1e-2)  # move off the zero-up initialization
        before = s.net.loss(p).item()
        s.on_packet(p)
        assert s.net.loss(p).item() < before

    def test_after_done_is_protocol_error(self, world):
        s = server(world, (0, 1))
        ps = packets(world, 0, "wide", 8)
        s.on_packet(ps[0])
        s.mark_done(0)
        with pytest.raises(ProtocolError):
            s.on_packet(ps[1])
        assert s.rejected == 1 and s.packets_received + s.rejected == 2

    def test_unknown_client(self, world):
        with pytest.raises(ProtocolError):
            server(world).on_packet(packets(world, 7, "wide", 4)[0])

    def test_double_done(self, world):
        s = server(world)
        s.mark_done(0)
        with pytest.raises(ProtocolError):
            s.mark_done(0)

    def test_malformed(self, world):
        p = packets(world, 0, "wide", 4)[0]
        p.blocks = p.blocks[:1]
        with pytest.raises(ProtocolError):
            server(world).on_packet(p)


class TestReplay:
    def test_empty_cache(self, world):
        assert server(world).idle_replay(10) == 0

    def test_budget_exact(self, world):
        s = server(world)
        s.on_packet(packets(world, 0, "wide", 4)[0])
        assert s.idle_replay(10) == 10 and s.replay_steps == 10


class TestStandalone:
    def test_during_streaming_is_phase_error(self, world):
        s = server(world, (0, 1))
        s.mark_done(0)
        with pytest.raises(PhaseError):
            s.standalone_tune(1)

    def test_zero_epochs_unchanged(self, world):
        s = server(world)
        s.on_packet(packets(world, 0, "wide", 4)[0])
        s.mark_done(0)
        before = s.net.checksum()
        s.standalone_tune(0)
        assert s.net.checksum() == before and s.phase == DONE

    def test_phase_sequence(self, world):
        s = server(world)
        assert s.phase == STREAMING
        s.mark_done(0)
        s.begin_standalone()
        assert s.phase == STANDALONE
        with pytest.raises(PhaseError):
            s.on_packet(packets(world, 0, "wide", 4)[0])

    def test_epochs_visit_every_record(self, world):
        s = server(world)
        for p in packets(world, 0, "wide", 20):
            s.on_packet(p)
        s.mark_done(0)
        s.standalone_tune(3)
        assert s.standalone_steps == 3 * len(s.cache)

    def test_memorization(self, world):
        backbones, plan = world
        data = generate(TASK, 16)
        s = ServerState(SideNetwork(plan, rank=2, seed=0), [0], TrainSettings(lr=1e-2))
        shard = LocalShard(0, data)
        while not shard.exhausted:
            s.on_packet(process_batch(backbones["wide"], plan, shard, 8))
        s.mark_done(0)
        s.standalone_tune(20)
        assert (corrected_predict(s.net, backbones["wide"], data.tokens) == data.labels).all()

    def test_standalone_does_not_raise_cached_loss(self, world):
        rises = []
        for seed in range(5):
            s = server(world)
            ps = packets(world, 0, "wide", 24, seed=seed)
            for p in ps:
                s.on_packet(p)
            s.mark_done(0)
            before = np.mean([s.net.loss(p).item() for p in ps])
            s.standalone_tune(5)
            rises.append(np.mean([s.net.loss(p).item() for p in ps]) - before)
        assert np.mean(rises) <= 0


class TestCache:
    def test_conservation(self, world):
        s = server(world, (0, 1))
        for p in packets(world, 0, "wide", 12) + packets(world, 1, "narrow", 8, seed=1):
            s.on_packet(p)
        assert len(s.cache) == s.packets_received == 5

    @given(st.permutations(range(6)), st.integers(0, 100))
    def test_multiset_independent_of_arrival_order(self, perm, seed):
        ps = _PACKETS
        a, b = ActivationCache(seed), ActivationCache(seed + 1)
        for p in ps:
            a.insert(p)
        for i in perm:
            b.insert(ps[i])
        assert a.multiset() == b.multiset()
        assert [r.key for r in a.canonical()] == [r.key for r in b.canonical()]

    def test_uniform_sampling(self, world):
        cache = ActivationCache(3)
        for p in _PACKETS:
            cache.insert(p)
        rng = np.random.default_rng(0)
        counts = np.bincount([cache.sample(rng).record_id for _ in range(6000)], minlength=6)
        assert np.abs(counts / 6000 - 1 / 6).max() < 0.02

    def test_record_roundtrip(self, world):
        cache = ActivationCache(0)
        rec = cache.insert(_PACKETS[0], 1.5)
        blob = dumps_record(rec)
        back = loads_record(blob)
        assert dumps_record(back) == blob and back.arrival_time == 1.5

    def test_spill(self, world, tmp_path):
        cache = ActivationCache(0, tmp_path, spill_threshold=2)
        for p in _PACKETS:
            cache.insert(p)
        spilled = [r for r in cache if r.spill_path is not None]
        assert len(spilled) == 4 and len(list(tmp_path.iterdir())) == 4
        r = spilled[0]
        assert dumps_record(load_record(r.spill_path)) == r.spill_path.read_bytes()
        mem = ActivationCache(0)
        for p in _PACKETS:
            mem.insert(p)
        assert cache.multiset() == mem.multiset()


def test_zero_net_accuracy_is_backbone_accuracy(world):
    backbones, plan = world
    data = generate(TASK, 40, "eval")
    sets = {k: EvalSet.build(b, plan, data, chunk=16) for k, b in backbones.items()}
    net = SideNetwork(plan, rank=2)
    net.zero_()
    res = evaluate_net(net, sets)
    for k, es in sets.items():
        assert res["per_backbone"][k] == es.backbone_accuracy()
    assert res["global"] == pytest.approx(np.mean(list(res["per_backbone"].values())))


def test_event_log(world, tmp_path):
    s = server(world)
    s.on_packet(packets(world, 0, "wide", 4)[0], t=0.5)
    path = tmp_path / "events.jsonl"
    s.write_events(path)
    import json
    rows = [json.loads(x) for x in path.read_text().splitlines()]
    assert {"t", "event", "step", "phase"} <= set(rows[0])
    assert rows[-1]["event"] == "arrival_step" and "loss" in rows[-1]


def _make_packets():
    cfgs = tiny_backbones()
    plan = make_plan(list(cfgs.values()))
    shard = LocalShard(0, generate(TASK, 24))
    b = bb.build(cfgs["wide"])
    return [process_batch(b, plan, shard, 4) for _ in range(6)]


_PACKETS = _make_packets()
