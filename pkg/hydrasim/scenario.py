"""
Scenario files: a JSON document describing topology, faults, dataset actions,
training jobs, coin rates and the assertions a run must satisfy.

Validation never raises for a malformed document; it returns the list of
problems so the CLI can print all of them at once.
"""

import json
import logging
from pathlib import Path
from typing import Any, Literal
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, Field, ValidationError, model_validator

from hydrasim.coin import CoinRates
from hydrasim.config import POOL_WEIGHT_CLOSENESS, POOL_WEIGHT_COMPUTE, POOL_WEIGHT_LATENCY
from hydrasim.models import DeviceProfile, HydraError
from hydrasim.sim import FaultEntry, FaultSchedule, LatencyModel
from hydrasim.trainer import TrainingJob

log = logging.getLogger(__name__)


class ScenarioError(HydraError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("; ".join(errors))


class LatencySpec(BaseModel):
    kind: Literal["constant", "planar", "matrix"] = "planar"
    ms: float = Field(default=10.0, ge=0)
    min_ms: float = Field(default=5.0, ge=0)
    max_ms: float = Field(default=50.0, ge=0)
    jitter: float = Field(default=0.0, ge=0, lt=1)
    matrix: list[list[float]] | None = None

    @model_validator(mode="after")
    def _check(self) -> Self:
        if self.kind == "matrix" and self.matrix is None:
            raise ValueError("matrix latency needs a matrix")
        if self.min_ms > self.max_ms:
            raise ValueError("min_ms exceeds max_ms")
        return self


class ComputeSpec(BaseModel):
    compute_ms_min: float = Field(default=1.0, gt=0)
    compute_ms_max: float = Field(default=4.0, gt=0)
    memory_min: int = Field(default=16, ge=1)
    memory_max: int = Field(default=64, ge=1)
    overrides: dict[int, DeviceProfile] = Field(default_factory=dict)


class Topology(BaseModel):
    peers: int = Field(ge=1)
    bootstrap_servers: int = Field(default=1, ge=1)
    latency: LatencySpec = Field(default_factory=LatencySpec)
    compute: ComputeSpec = Field(default_factory=ComputeSpec)
    join_interval: int = Field(default=5, ge=0)
    t_b: float = Field(default=2.0, gt=0)

    @property
    def size(self) -> int:
        return self.bootstrap_servers + self.peers

    @property
    def peer_addresses(self) -> range:
        return range(self.bootstrap_servers, self.size)


class DatasetAction(BaseModel):
    at: int = Field(ge=0)
    op: Literal["create", "contribute", "download", "validate", "annotate"]
    peer: int
    title: str
    files: list[tuple[str, int]] = Field(default_factory=list)
    contributor: int | None = None
    valid: int = Field(default=0, ge=0)
    invalid: int = Field(default=0, ge=0)
    items: int = Field(default=0, ge=0)


class PoolCriteria(BaseModel):
    latency_weight: float = Field(default=POOL_WEIGHT_LATENCY, ge=0)
    compute_weight: float = Field(default=POOL_WEIGHT_COMPUTE, ge=0)
    closeness_weight: float = Field(default=POOL_WEIGHT_CLOSENESS, ge=0)


Check = Literal[
    "no_safety_violations",
    "min_elections",
    "loss_decreases",
    "epoch_audit",
    "ledger_audit",
    "dataset_recovered",
    "all_jobs_completed",
]


class Assertion(BaseModel):
    check: Check
    value: float | None = None
    job: str | None = None
    dataset: str | None = None


class Scenario(BaseModel):
    name: str
    seed: int = 0
    duration: int = Field(gt=0)
    topology: Topology
    faults: list[FaultEntry] = Field(default_factory=list)
    datasets: list[DatasetAction] = Field(default_factory=list)
    jobs: list[TrainingJob] = Field(default_factory=list)
    rates: CoinRates = Field(default_factory=CoinRates)
    balances: dict[int, float] = Field(default_factory=dict)
    pool: PoolCriteria = Field(default_factory=PoolCriteria)
    assertions: list[Assertion] = Field(default_factory=list)

    def fault_schedule(self) -> FaultSchedule:
        return FaultSchedule(entries=sorted(self.faults, key=lambda e: e.time))

    def latency_model(self) -> LatencyModel:
        spec = self.topology.latency
        n = self.topology.size
        match spec.kind:
            case "constant":
                return LatencyModel.constant(n, spec.ms, jitter_fraction=spec.jitter, rng_seed=self.seed)
            case "planar":
                return LatencyModel.planar(
                    n, min_ms=spec.min_ms, max_ms=spec.max_ms, seed=self.seed, jitter_fraction=spec.jitter
                )
            case _:
                return LatencyModel(base=np.asarray(spec.matrix), jitter_fraction=spec.jitter, rng_seed=self.seed)

    def profiles(self) -> list[DeviceProfile]:
        """Seeded device profiles in peer address order."""
        spec = self.topology.compute
        rng = np.random.default_rng([self.seed, 7])
        out: list[DeviceProfile] = []
        for address in self.topology.peer_addresses:
            compute = float(rng.uniform(spec.compute_ms_min, spec.compute_ms_max))
            memory = int(rng.integers(spec.memory_min, spec.memory_max + 1))
            out.append(spec.overrides.get(address, DeviceProfile(compute_ms=compute, memory=memory)))
        return out


def _format(e: ValidationError) -> list[str]:
    return [f"{'.'.join(str(p) for p in err['loc']) or 'scenario'}: {err['msg']}" for err in e.errors()]


def check_references(scenario: Scenario) -> list[str]:
    """Cross-field rules pydantic cannot express on single fields."""
    errors: list[str] = []
    topo = scenario.topology
    peers = set(topo.peer_addresses)
    bootstrap = set(range(topo.bootstrap_servers))

    if topo.compute.compute_ms_min > topo.compute.compute_ms_max:
        errors.append("topology.compute: compute_ms_min exceeds compute_ms_max")
    if topo.compute.memory_min > topo.compute.memory_max:
        errors.append("topology.compute: memory_min exceeds memory_max")
    if topo.latency.kind == "matrix" and topo.latency.matrix is not None:
        if len(topo.latency.matrix) != topo.size:
            errors.append(f"topology.latency: matrix has {len(topo.latency.matrix)} rows, topology has {topo.size} nodes")
    for address in topo.compute.overrides:
        if address not in peers:
            errors.append(f"topology.compute.overrides: {address} is not a peer")

    for i, entry in enumerate(scenario.faults):
        for node in entry.action.nodes():
            if node in bootstrap:
                errors.append(f"faults.{i}: bootstrap server {node} cannot be faulted")
            elif node not in peers:
                errors.append(f"faults.{i}: unknown node {node}")
        if entry.time > scenario.duration:
            errors.append(f"faults.{i}: at t={entry.time} after the run ends")

    created: dict[str, int] = {}
    for i, action in enumerate(sorted(scenario.datasets, key=lambda a: a.at)):
        if action.peer not in peers:
            errors.append(f"datasets.{i}: unknown peer {action.peer}")
        if action.op == "create":
            if action.title in created:
                errors.append(f"datasets.{i}: dataset {action.title!r} created twice")
            created.setdefault(action.title, action.at)
        elif action.title not in created:
            errors.append(f"datasets.{i}: {action.op} on undefined dataset {action.title!r}")
        if action.op == "validate" and action.contributor not in peers:
            errors.append(f"datasets.{i}: validate needs a contributor peer")

    names: set[str] = set()
    for i, job in enumerate(scenario.jobs):
        if job.name in names:
            errors.append(f"jobs.{i}: duplicate job name {job.name!r}")
        names.add(job.name)
        if job.coordinator not in peers:
            errors.append(f"jobs.{i}: coordinator {job.coordinator} is not a peer")
        if job.dataset is not None and job.dataset not in created:
            errors.append(f"jobs.{i}: undefined dataset {job.dataset!r}")
        if job.ranks * job.replicas > topo.peers - 1:
            errors.append(f"jobs.{i}: needs {job.ranks * job.replicas} machines, only {topo.peers - 1} besides the coordinator")

    for address in scenario.balances:
        if address not in peers:
            errors.append(f"balances: {address} is not a peer")

    for i, assertion in enumerate(scenario.assertions):
        if assertion.job is not None and assertion.job not in names:
            errors.append(f"assertions.{i}: undefined job {assertion.job!r}")
        if assertion.dataset is not None and assertion.dataset not in created:
            errors.append(f"assertions.{i}: undefined dataset {assertion.dataset!r}")
        if assertion.check == "min_elections" and assertion.value is None:
            errors.append(f"assertions.{i}: min_elections needs a value")
    return errors


def validate_scenario(data: Any) -> tuple[Scenario | None, list[str]]:
    try:
        scenario = Scenario.model_validate(data)
    except ValidationError as e:
        return None, _format(e)
    errors = check_references(scenario)
    return (scenario if not errors else None), errors


def load_scenario(path: Path | str) -> Scenario:
    """Read and validate a scenario file; raises ScenarioError listing every problem."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ScenarioError([f"{path}: no such file"]) from None
    except json.JSONDecodeError as e:
        raise ScenarioError([f"{path}: invalid JSON ({e.msg} at line {e.lineno})"]) from None
    scenario, errors = validate_scenario(data)
    if scenario is None:
        raise ScenarioError(errors)
    return scenario
