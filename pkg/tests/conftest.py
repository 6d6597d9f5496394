import math
from collections.abc import Callable

import pytest
from hypothesis import HealthCheck, settings

from hydrasim.config import HydraSettings
from hydrasim.models import DeviceProfile
from hydrasim.peer import Network, build_network
from hydrasim.sim import LatencyModel, Simulator

settings.register_profile("default", settings(deadline=None, suppress_health_check=[HealthCheck.too_slow]))
settings.register_profile("thorough", settings(deadline=None, max_examples=1000))
settings.load_profile("default")


def scaled(n: int, floor: int = 1) -> int:
    """Sweep size scaled by HYDRA_SWEEP_SCALE (1.0 keeps the desk-sized default)."""
    return max(floor, math.ceil(n * HydraSettings().sweep_scale))


@pytest.fixture
def constant_latency() -> Callable[..., LatencyModel]:
    def make(n: int, ms: float = 10.0) -> LatencyModel:
        return LatencyModel.constant(n, ms)

    return make


@pytest.fixture
def sim(constant_latency: Callable[..., LatencyModel]) -> Simulator:
    return Simulator(constant_latency(8), seed=1)


@pytest.fixture
def small_network() -> Callable[..., Network]:
    """Inducted network of `peers` equal peers behind one bootstrap server."""

    def make(peers: int = 6, *, seed: int = 3, ms: float = 10.0, compute_ms: float = 1.0) -> Network:
        profiles = [DeviceProfile(compute_ms=compute_ms, memory=1_000) for _ in range(peers)]
        network = build_network(LatencyModel.constant(peers + 1, ms), profiles, seed=seed, t_b=2.0)
        network.sim.execute(network.primary.node, network.join_all(), limit=60_000)
        return network

    return make
