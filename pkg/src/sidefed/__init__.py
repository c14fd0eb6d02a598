"""Forward-only federated side tuning over heterogeneous frozen backbones."""

from .alignment import AlignmentPlan, make_plan
from .backbone import BackboneConfig, build, forward_with_taps
from .config import RunConfig, load_config
from .server import ActivationCache, ServerState
from .sidenet import SideNetwork
from .sim import simulate, simulate_sync_baseline

__all__ = [
    "ActivationCache", "AlignmentPlan", "BackboneConfig", "RunConfig", "ServerState",
    "SideNetwork", "build", "forward_with_taps", "load_config", "make_plan", "simulate",
    "simulate_sync_baseline",
]
