"""
Scenario runner.

Builds the network a scenario describes, inducts the peers, replays the
scripted faults and dataset actions, runs the training jobs from their
coordinators and finally checks the scenario's assertions. One scenario is
one simulation; the CLI fans independent seeds out across threads.
"""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import simpy

from hydrasim.coin import RewardKind, vcu
from hydrasim.config import BUCKET_CAPACITY
from hydrasim.metrics import METRICS_FILE, MetricsSink, write_report
from hydrasim.models import DeviceProfile, HydraError, ProfileReply, ProfileRequest
from hydrasim.peer import Network, Peer, build_network
from hydrasim.registry import DatasetMeta, dataset_hash
from hydrasim.scenario import Assertion, DatasetAction, PoolCriteria, Scenario
from hydrasim.sim import Process
from hydrasim.trainer import JobReport, TrainingJob

log = logging.getLogger(__name__)

LEDGER_FILE = "ledger.csv"


class JobRejectedError(HydraError):
    pass


@dataclass(frozen=True)
class Candidate:
    address: int
    peer_id: int
    latency_ms: float
    compute_ms: float


def _minmax(values: np.ndarray) -> np.ndarray:
    span = values.max() - values.min()
    if span == 0:
        return np.zeros_like(values)
    return (values - values.min()) / span


def select_machine_pool(
    coordinator_id: int,
    candidates: Sequence[Candidate],
    budget: float,
    *,
    needed: int,
    samples: int,
    t_b: float,
    criteria: PoolCriteria | None = None,
) -> list[int]:
    """
    Rank candidates by a weighted sum of low latency, fast compute and id
    closeness to the coordinator, then take them in order until their
    combined capacity covers the budget. Raises JobRejectedError when the
    result cannot host `needed` machines.
    """
    criteria = criteria or PoolCriteria()
    if budget <= 0:
        raise JobRejectedError(f"budget {budget} is not spendable")
    if len(candidates) < needed:
        raise JobRejectedError(f"{len(candidates)} live peers, job needs {needed}")

    latency = np.array([c.latency_ms for c in candidates], dtype=np.float64)
    compute = np.array([c.compute_ms for c in candidates], dtype=np.float64)
    distance = np.array([float(c.peer_id ^ coordinator_id) for c in candidates], dtype=np.float64)
    score = (
        criteria.latency_weight * _minmax(-latency)
        + criteria.compute_weight * _minmax(-compute)
        + criteria.closeness_weight * _minmax(-distance)
    )
    order = sorted(range(len(candidates)), key=lambda i: (-score[i], candidates[i].address))

    pool: list[int] = []
    capacity = 0.0
    for i in order:
        if capacity >= budget:
            break
        pool.append(candidates[i].address)
        capacity += vcu(t_b, candidates[i].compute_ms, samples)
    if len(pool) < needed:
        raise JobRejectedError(f"budget {budget} covers {len(pool)} machines, job needs {needed}")
    return pool


def survey(peer: Peer, job: TrainingJob) -> Process:
    """Probe the peers the coordinator knows; returns live candidates and their profiles."""
    node = peer.node
    contacts = {c.address: c for c in peer.dht.table.contacts()} if peer.dht.table is not None else {}
    if peer.peer_id is not None:
        wanted = max(2 * job.ranks * job.replicas, BUCKET_CAPACITY)
        for contact in (yield from peer.dht.closest_peers(peer.peer_id, wanted)):
            contacts.setdefault(contact.address, contact)
    contacts.pop(node.node_id, None)

    started = node.now
    addresses = sorted(contacts)
    replies = yield from node.collect([node.request(a, ProfileRequest()) for a in addresses])
    candidates: list[Candidate] = []
    profiles: dict[int, DeviceProfile] = {}
    for address, reply in zip(addresses, replies):
        if not isinstance(reply, ProfileReply) or reply.peer_id is None:
            continue
        profiles[address] = reply.profile
        candidates.append(
            Candidate(
                address=address,
                peer_id=reply.peer_id,
                latency_ms=float(node.sim.latency.base[node.node_id, address]),
                compute_ms=reply.profile.compute_ms,
            )
        )
    log.debug(f"survey from {node.node_id}: {len(candidates)}/{len(addresses)} live in {node.now - started} ms")
    return candidates, profiles


@dataclass
class RunResult:
    scenario: str
    seed: int
    network: Network
    metrics: MetricsSink
    reports: dict[str, JobReport] = field(default_factory=dict)
    failures: list[str] = field(default_factory=list)
    out_dir: Path | None = None

    @property
    def ok(self) -> bool:
        return not self.failures


class ScenarioRun:
    def __init__(self, scenario: Scenario, *, seed: int | None = None, trace: bool = False):
        self.scenario = scenario
        self.seed = scenario.seed if seed is None else seed
        self.metrics = MetricsSink()
        latency = scenario.latency_model()
        if seed is not None:
            latency = latency.model_copy(update={"rng_seed": self.seed})
        self.network = build_network(
            latency,
            scenario.profiles(),
            bootstrap_servers=scenario.topology.bootstrap_servers,
            seed=self.seed,
            t_b=scenario.topology.t_b,
            rates=scenario.rates,
            trace=trace,
            metrics=self.metrics,
        )
        self.sim = self.network.sim
        self.result = RunResult(scenario.name, self.seed, self.network, self.metrics)

    def _grant_balances(self) -> None:
        ledger = self.network.ledger
        for address, amount in sorted(self.scenario.balances.items()):
            balance = ledger.award(RewardKind.GRANT, address, amount, 0, key=f"grant:{address}")
            self.metrics.emit(0, address, "coin.balance", float(balance))

    def _await_join(self, peer: Peer) -> Process:
        while not peer.joined:
            if self.sim.now >= self.scenario.duration:
                return False
            yield peer.node.sleep(self.sim.rpc_timeout)
        return True

    def _spawn_on(self, address: int, what: str, fn: Callable[[Peer], Process]) -> None:
        peer = self.network.peer(address)
        if not peer.node.online:
            log.warning(f"t={self.sim.now} skipping {what}: peer {address} is down")
            self.metrics.emit(self.sim.now, address, "harness.skipped", what)
            return
        peer.node.spawn(fn(peer))

    def _dataset_action(self, action: DatasetAction, peer: Peer) -> Process:
        joined = yield from self._await_join(peer)
        if not joined:
            return None
        client = peer.client
        hash_ = dataset_hash(action.title)
        ok = True
        match action.op:
            case "create":
                outcome = yield from client.create_dataset(action.title)
                ok = outcome.ok
            case "contribute":
                outcome = yield from client.contribute(hash_, action.files)
                ok = outcome.ok
            case "download":
                report = yield from client.download(hash_)
                ok = report.complete
            case "validate":
                client.validate(action.contributor, action.valid, action.invalid, hash_)  # type: ignore[arg-type]
            case "annotate":
                client.annotate(action.items, hash_)
        if not ok:
            log.warning(f"t={self.sim.now} {action.op} of {action.title!r} by peer {peer.address} failed")
        peer.node.emit("harness.action", {"op": action.op, "title": action.title, "ok": ok})
        return ok

    def _job(self, job: TrainingJob, peer: Peer) -> Process:
        joined = yield from self._await_join(peer)
        if not joined:
            self.result.reports[job.name] = JobReport(job.name, "rejected", "coordinator never joined")
            return None
        try:
            return (yield from self._launch(job, peer))
        except simpy.Interrupt:
            # coordinator crashed mid-job
            self.result.reports[job.name] = JobReport(job.name, "aborted", "coordinator lost")
            self.metrics.emit(self.sim.now, peer.address, "train.job", {"job": job.name, "status": "aborted", "steps": 0})
            raise

    def _launch(self, job: TrainingJob, peer: Peer) -> Process:
        coordinator = peer.coordinator()
        candidates, profiles = yield from survey(peer, job)
        config = job.config
        try:
            pool = select_machine_pool(
                peer.peer_id or 0,
                candidates,
                job.budget,
                needed=job.ranks * job.replicas,
                samples=math.ceil(config.global_batch / job.ranks) * config.max_steps,
                t_b=peer.t_b or self.scenario.topology.t_b,
                criteria=self.scenario.pool,
            )
        except JobRejectedError as e:
            log.warning(f"job {job.name} rejected: {e}")
            self.result.reports[job.name] = JobReport(job.name, "rejected", str(e))
            peer.node.emit("train.job", {"job": job.name, "status": "rejected", "steps": 0})
            return None
        refused = yield from coordinator.spend(job)
        if refused is not None:
            log.warning(f"job {job.name} rejected: {refused}")
            self.result.reports[job.name] = JobReport(job.name, "rejected", refused)
            peer.node.emit("train.job", {"job": job.name, "status": "rejected", "steps": 0})
            return None
        report = yield from coordinator.run(job, pool, profiles)
        self.result.reports[job.name] = report
        return report

    def _director(self) -> Process:
        joined = yield from self.network.join_all(interval=self.scenario.topology.join_interval)
        log.info(f"t={self.sim.now} {joined} peers joined")
        return joined

    def start(self) -> None:
        self._grant_balances()
        self.sim.schedule_faults(self.scenario.fault_schedule())
        self.network.primary.node.spawn(self._director())
        for action in sorted(self.scenario.datasets, key=lambda a: a.at):
            self.sim.call_at(
                action.at,
                lambda a=action: self._spawn_on(a.peer, f"{a.op}:{a.title}", lambda p: self._dataset_action(a, p)),
            )
        for job in self.scenario.jobs:
            self.sim.call_at(
                job.start_at,
                lambda j=job: self._spawn_on(j.coordinator, f"job:{j.name}", lambda p: self._job(j, p)),
            )

    def run(self) -> RunResult:
        self.start()
        self.sim.run_until(self.scenario.duration)
        for assertion in self.scenario.assertions:
            problem = self.check(assertion)
            if problem is not None:
                self.result.failures.append(problem)
        for problem in self.result.failures:
            log.error(f"scenario {self.scenario.name} (seed {self.seed}): {problem}")
        return self.result

    # assertions

    def _jobs(self, assertion: Assertion) -> list[TrainingJob]:
        return [j for j in self.scenario.jobs if assertion.job is None or j.name == assertion.job]

    def _recovered(self, title: str) -> bool:
        hash_ = dataset_hash(title)
        state = self.network.primary.state
        if hash_ not in state.leader_index or state.leader_index[hash_].lost:
            return False
        probe = next((p for _, p in sorted(self.network.peers.items()) if p.node.online and p.joined), None)
        if probe is None:
            return False
        meta = self.sim.execute(probe.node, probe.client.fetch_meta(hash_), limit=20 * self.sim.rpc_timeout)
        return isinstance(meta, DatasetMeta)

    def check(self, assertion: Assertion) -> str | None:
        """None when the assertion holds, otherwise a readable failure."""
        monitor = self.network.monitor
        match assertion.check:
            case "no_safety_violations":
                if not monitor.ok:
                    return f"{len(monitor.violations)} raft safety violations: {monitor.violations[0]}"
            case "min_elections":
                elections = sum(monitor.elections.values())
                if elections < (assertion.value or 0):
                    return f"{elections} elections, expected at least {assertion.value:g}"
            case "loss_decreases":
                for job in self._jobs(assertion):
                    report = self.result.reports.get(job.name)
                    if report is None or len(report.losses) < 2:
                        return f"job {job.name} has no loss curve"
                    if not report.losses[-1] < report.losses[0]:
                        return f"job {job.name} loss went {report.losses[0]:.6g} -> {report.losses[-1]:.6g}"
            case "epoch_audit":
                for job in self._jobs(assertion):
                    report = self.result.reports.get(job.name)
                    if report is None or report.ledger is None:
                        return f"job {job.name} never started"
                    problems = report.ledger.audit()
                    if problems:
                        return f"job {job.name} epoch audit: {problems[0]}"
            case "ledger_audit":
                problems = self.network.ledger.audit()
                if problems:
                    return f"coin ledger audit: {problems[0]}"
            case "dataset_recovered":
                titles = [assertion.dataset] if assertion.dataset else sorted(
                    {a.title for a in self.scenario.datasets if a.op == "create"}
                )
                for title in titles:
                    if not self._recovered(title):
                        return f"dataset {title!r} not recovered"
            case "all_jobs_completed":
                for job in self.scenario.jobs:
                    report = self.result.reports.get(job.name)
                    if report is None:
                        return f"job {job.name} did not finish by t={self.scenario.duration}"
                    if not report.ok:
                        return f"job {job.name} {report.status}: {report.reason}"
        return None


def write_outputs(result: RunResult, out_dir: Path) -> Path:
    """metrics.jsonl, summary.txt with the assertion verdicts, CSV tables and the coin ledger."""
    out_dir.mkdir(parents=True, exist_ok=True)
    result.metrics.write_jsonl(out_dir / METRICS_FILE)
    summary = write_report(result.metrics.records, out_dir)
    result.network.ledger.export_csv(out_dir / LEDGER_FILE)
    lines = [f"scenario: {result.scenario}", f"seed: {result.seed}"]
    for name, report in sorted(result.reports.items()):
        lines.append(f"job {name}: {report.status} steps={report.steps} skipped={report.skipped_steps}")
    lines.append("assertions: " + ("passed" if result.ok else f"{len(result.failures)} failed"))
    lines.extend(f"  - {f}" for f in result.failures)
    with summary.open("a", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    result.out_dir = out_dir
    return summary


def run_scenario(
    scenario: Scenario,
    *,
    seed: int | None = None,
    out_dir: Path | None = None,
    trace: bool = False,
) -> RunResult:
    result = ScenarioRun(scenario, seed=seed, trace=trace).run()
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result
