import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sidefed.backbone import BackboneConfig
from sidefed.config import DeviceProfile, RunConfig, ServerConfig, TrainConfig
from sidefed.data import SyntheticTask

settings.register_profile("sidefed", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("sidefed")


def tiny_backbones():
    return {
        "narrow": BackboneConfig("narrow", 2, 8, 2, vocab=16, max_seq=8, num_classes=3, init_seed=11),
        "wide": BackboneConfig("wide", 3, 16, 4, vocab=16, max_seq=8, num_classes=3, init_seed=12),
    }


def tiny_config(**kw) -> RunConfig:
    """Two backbone types, three clients, a few dozen samples: runs in well under a second."""
    bbs = tiny_backbones()
    devices = (DeviceProfile("a", 0.01, 60.0, "narrow"), DeviceProfile("b", 0.004, 20.0, "wide"),
               DeviceProfile("c", 0.01, 60.0, "wide"))
    base = dict(name="tiny", seed=3, task=SyntheticTask(vocab=16, num_classes=3, seq=8, signal=0.5),
                train_samples=60, eval_samples=30, alpha=1.0,
                train=TrainConfig(lr=5e-3, batch=8, rank=2, standalone_epochs=2, replay_budget=4),
                server=ServerConfig(target_accuracy=0.5), backbones=bbs, devices=devices)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cfg():
    return tiny_config()
