from hydrasim.harness import RunResult, run_scenario, select_machine_pool
from hydrasim.models import HydraError
from hydrasim.peer import Network, build_network
from hydrasim.scenario import Scenario, load_scenario, validate_scenario
from hydrasim.sim import LatencyModel, Simulator

__all__ = [
    "HydraError",
    "LatencyModel",
    "Network",
    "RunResult",
    "Scenario",
    "Simulator",
    "build_network",
    "load_scenario",
    "run_scenario",
    "select_machine_pool",
    "validate_scenario",
]
__version__ = "0.1.0"
