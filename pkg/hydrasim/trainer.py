"""
Simulated synchronous SGD: rank state machines, worker compute and the
coordinator's step loop.

Each rank is a Raft group whose state machine holds the model weights. A step
stages every rank's gradient into its log, all-reduces the staged vectors, and
commits an update that reads the reduced vector from the finished session, so
every replica of every included rank moves to the same weights.
"""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from hydrasim.allreduce import (
    CollectiveCoordinator,
    HostRank,
    RankService,
    RankStateMachine,
    StagedInput,
)
from hydrasim.coin import CoinAward, CoinSpend, RewardKind, vcu
from hydrasim.config import PROPOSE_TIMEOUT_MS, REFRESH_CYCLES
from hydrasim.models import Ack, DeviceProfile, ErrorReply, Message
from hydrasim.placement import EnvSnapshot, InfeasibleBatchError, PlacementPolicy, allocate
from hydrasim.sim import Envelope, Node, Process
from hydrasim.training import (
    ChunkLedger,
    DivergenceError,
    LossScaler,
    Params,
    ToyModel,
    TrainingJobConfig,
    apply_update,
    decompress,
    handle_rank_loss,
    initial_params,
    local_gradients,
    synthetic_dataset,
    topk_compress,
    unflatten,
)

log = logging.getLogger(__name__)


class TrainingJob(BaseModel):
    """One training job as a scenario describes it."""

    name: str
    coordinator: int
    budget: float = Field(gt=0)
    ranks: int = Field(ge=1)
    replicas: int = Field(default=1, ge=1)
    dataset: str | None = None
    start_at: int = Field(default=0, ge=0)
    placement: Literal["uniform", "policy"] = "uniform"
    policy_episodes: int = Field(default=200, ge=0)
    config: TrainingJobConfig


class _Command(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class StageGradient(_Command):
    op: Literal["stage_gradient"] = "stage_gradient"
    key: str
    vector: np.ndarray
    n: int
    loss: float
    residual: np.ndarray | None = None


class ApplyUpdate(_Command):
    op: Literal["apply_update"] = "apply_update"
    step: int
    session: str | None
    n: int
    scale: float = 1.0
    skip: bool = False


class TrainingRankStateMachine(RankStateMachine):
    """Rank state plus the replicated model weights."""

    def __init__(self, config: TrainingJobConfig):
        super().__init__()
        self.config = config
        self.model = ToyModel.from_config(config)
        params = initial_params(config)
        self.weights: Params = [p.astype(np.float32) for p in params] if config.mixed else params
        self.residual: np.ndarray | None = None
        self.losses: dict[str, float] = {}
        self.step = 0

    def apply_other(self, index: int, command: Any) -> Any:
        match command:
            case StageGradient():
                if command.key not in self.staged:
                    self.staged[command.key] = StagedInput(np.array(command.vector, copy=True), command.n)
                    self.losses[command.key] = command.loss
                    if command.residual is not None:
                        self.residual = np.array(command.residual, copy=True)
                return command.n
            case ApplyUpdate():
                return self._update(command)
        return super().apply_other(index, command)

    def _update(self, cmd: ApplyUpdate) -> int:
        if cmd.step < self.step:
            return self.step
        if not cmd.skip and cmd.session is not None:
            reduced = self.sessions[cmd.session].result()
            grads = unflatten(reduced, self.model.shapes)
            if self.config.mixed:
                grads = [g.astype(np.float32) / np.float32(cmd.scale) for g in grads]
            self.weights = apply_update(self.weights, grads, cmd.n, self.config, cmd.step)
        self.step = cmd.step + 1
        return self.step


def rank_machine_factory(msg: HostRank) -> Callable[[], RankStateMachine]:
    if isinstance(msg.job, TrainingJobConfig):
        config = msg.job
        return lambda: TrainingRankStateMachine(config)
    return RankStateMachine


# worker


class ComputeRequest(Message):
    kind: Literal["COMPUTE"] = "COMPUTE"
    group: str
    step: int
    key: str
    indices: np.ndarray
    scale: float = 1.0


class ComputeReply(Message):
    kind: Literal["COMPUTE_REPLY"] = "COMPUTE_REPLY"
    group: str
    status: Literal["ok", "redirect", "retry", "diverged"]
    n: int = 0
    loss: float = 0.0
    worker: int | None = None
    leader_hint: int | None = None


class WorkerService:
    """Computes local gradients for the rank groups this node leads."""

    def __init__(self, node: Node, ranks: RankService, profile: DeviceProfile):
        self.node = node
        self.ranks = ranks
        self.profile = profile
        self._datasets: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        node.on(ComputeRequest, self._on_compute)

    def _data(self, config: TrainingJobConfig) -> tuple[np.ndarray, np.ndarray]:
        key = config.model_dump_json()
        if key not in self._datasets:
            self._datasets[key] = synthetic_dataset(config)
        return self._datasets[key]

    def _on_compute(self, envelope: Envelope) -> Any:
        msg: ComputeRequest = envelope.payload  # type: ignore[assignment]
        rank = self.ranks.ranks.get(msg.group)
        if rank is None:
            return ComputeReply(group=msg.group, status="retry")
        if not rank.member.is_leader:
            return ComputeReply(group=msg.group, status="redirect", leader_hint=rank.member.leader_id)
        return self._compute(msg)

    def _compute(self, msg: ComputeRequest) -> Process:
        rank = self.ranks.ranks[msg.group]
        member = rank.member
        ready = yield member.ready()
        if not ready:
            return ComputeReply(group=msg.group, status="redirect", leader_hint=member.leader_id)
        machine: TrainingRankStateMachine = member.state_machine  # type: ignore[assignment]
        if msg.key in machine.staged:
            staged = machine.staged[msg.key]
            return ComputeReply(
                group=msg.group, status="ok", n=staged.n, loss=machine.losses.get(msg.key, 0.0), worker=self.node.node_id
            )
        yield self.node.sleep(math.ceil(self.profile.compute_ms * len(msg.indices)))
        if not member.is_leader:
            return ComputeReply(group=msg.group, status="redirect", leader_hint=member.leader_id)
        config = machine.config
        residual = None
        if len(msg.indices) == 0:
            vector = np.zeros(config.parameter_count, dtype=np.float32 if config.mixed else np.float64)
            n, loss = 0, 0.0
        else:
            x, y = self._data(config)
            try:
                grads = local_gradients(
                    machine.model, machine.weights, x, y, msg.indices, scale=msg.scale, half=config.mixed
                )
            except DivergenceError as e:
                log.warning(f"rank {msg.group} diverged at step {msg.step}: {e}")
                self.node.emit("train.divergence", {"group": msg.group, "step": msg.step})
                return ComputeReply(group=msg.group, status="diverged")
            vector, n, loss = grads.flat(), grads.n, grads.loss
            if config.compression_k is not None:
                sparse, residual = topk_compress(vector, config.compression_k, machine.residual)
                vector = decompress(sparse)
        outcome = yield from member.propose_within(
            StageGradient(key=msg.key, vector=vector, n=n, loss=loss, residual=residual)
        )
        if not outcome.committed:
            return ComputeReply(group=msg.group, status="retry", leader_hint=outcome.leader_hint)
        return ComputeReply(group=msg.group, status="ok", n=n, loss=loss, worker=self.node.node_id)


# coordinator


@dataclass
class JobReport:
    name: str
    status: Literal["completed", "rejected", "aborted", "diverged"]
    reason: str | None = None
    steps: int = 0
    losses: list[float] = field(default_factory=list)
    groups: dict[str, list[int]] = field(default_factory=dict)
    lost: list[str] = field(default_factory=list)
    skipped_steps: int = 0
    vcu_awarded: float = 0.0
    ledger: ChunkLedger | None = None

    @property
    def ok(self) -> bool:
        return self.status == "completed"


class TrainingCoordinator:
    """Runs training jobs from the initiating peer."""

    def __init__(self, node: Node, ranks: RankService, ledger_address: int, t_b: float):
        self.node = node
        self.ranks = ranks
        self.ledger_address = ledger_address
        self.t_b = t_b

    def spend(self, job: TrainingJob) -> Process:
        """Pay the job's budget; returns an error string when the ledger refuses."""
        reply = yield self.node.request(
            self.ledger_address, CoinSpend(peer=self.node.node_id, amount=job.budget, key=f"job:{job.name}")
        )
        if isinstance(reply, Ack):
            return None
        if isinstance(reply, ErrorReply):
            return reply.reason
        return "ledger unreachable"

    def _host(self, groups: dict[str, list[int]], config: TrainingJobConfig) -> Process:
        requests = []
        for group, members in groups.items():
            for i, member in enumerate(members):
                msg = HostRank(
                    group=group,
                    members=tuple(members),
                    coordinator=self.node.node_id,
                    job=config,
                    campaign=i == 0,
                )
                requests.append(self.node.request(member, msg))
        replies = yield from self.node.collect(requests)
        return sum(isinstance(r, Ack) for r in replies)

    def snapshot(self, leaders: list[int], profiles: dict[int, DeviceProfile]) -> EnvSnapshot:
        base = self.node.sim.latency.base
        return EnvSnapshot(
            latency=base[np.ix_(leaders, leaders)],
            compute=[profiles[a].compute_ms for a in leaders],
            memory=[profiles[a].memory for a in leaders],
        )

    def _sizes(self, job: TrainingJob, snapshot: EnvSnapshot) -> np.ndarray:
        batch = job.config.global_batch
        if job.placement == "policy" and snapshot.k > 1:
            policy = PlacementPolicy.create(snapshot.k, seed=job.config.dataset_seed)
            policy.train(snapshot, batch, job.policy_episodes)
            return policy.greedy(snapshot, batch)
        return allocate(np.full(snapshot.k, 1.0 / snapshot.k), batch, snapshot.memory)

    def _compute(self, collective: CollectiveCoordinator, group: str, msg: ComputeRequest, budget: int) -> Process:
        address = collective.leader(group)
        for _ in range(2 * REFRESH_CYCLES):
            if group in collective.lost:
                return None
            if address is None:
                address = yield from collective.leader_refresh(group)
                continue
            reply = yield self.node.request(address, msg.model_copy(update={"group": group}), budget)
            if isinstance(reply, ComputeReply) and reply.status in ("ok", "diverged"):
                return reply
            if isinstance(reply, ComputeReply) and reply.status == "redirect" and reply.leader_hint not in (
                None,
                address,
            ):
                address = reply.leader_hint
                continue
            if isinstance(reply, ComputeReply) and reply.status == "retry":
                continue
            address = yield from collective.leader_refresh(group, suspect=address)
        return None

    def run(self, job: TrainingJob, pool: list[int], profiles: dict[int, DeviceProfile]) -> Process:
        """The job's step loop over rank groups drawn from `pool` in order."""
        config = job.config
        needed = job.ranks * job.replicas
        if len(pool) < needed:
            return JobReport(job.name, "rejected", f"pool of {len(pool)} machines, job needs {needed}")
        groups = {
            f"rank:{job.name}:{i}": pool[i * job.replicas : (i + 1) * job.replicas] for i in range(job.ranks)
        }
        report = JobReport(job.name, "completed", groups=groups)
        collective = CollectiveCoordinator(self.node, self.ranks, groups)
        collective.tag = job.name
        hosted = yield from self._host(groups, config)
        log.info(f"job {job.name}: {hosted} replicas hosted across {len(groups)} ranks")
        for group, members in groups.items():
            collective.seed_leader(group, members[0])
            yield from collective.leader_refresh(group, suspect=members[0])

        ledger = ChunkLedger(config.dataset_size, self.node.rng(f"chunks:{job.name}"))
        report.ledger = ledger
        scaler = LossScaler(config.loss_scale, dynamic=config.dynamic_loss_scale)
        max_compute = max(profiles[a].compute_ms for a in pool)
        membership: list[str] = []
        sizes = np.zeros(0, dtype=np.int64)

        for step in range(config.max_steps):
            active = [g for g in groups if g not in collective.lost]
            if not active:
                report.status, report.reason = "aborted", "every rank lost"
                break
            if active != membership:
                leaders = [collective.leader(g) or groups[g][0] for g in active]
                try:
                    sizes = self._sizes(job, self.snapshot(leaders, profiles))
                except InfeasibleBatchError as e:
                    report.status, report.reason = "aborted", str(e)
                    break
                membership = active
            started = self.node.now
            chunks = dict(zip(active, ledger.assign(list(sizes))))
            budget = (
                math.ceil(max_compute * max(len(c) for c in chunks.values()))
                + PROPOSE_TIMEOUT_MS
                + 2 * self.node.sim.rpc_timeout
            )
            key = f"grad:{job.name}:{step}"
            procs = {
                g: self.node.spawn(
                    self._compute(
                        collective,
                        g,
                        ComputeRequest(group=g, step=step, key=key, indices=chunks[g].indices, scale=scaler.scale),
                        budget,
                    )
                )
                for g in active
            }
            yield self.node.sim.env.all_of(list(procs.values()))
            replies: dict[str, ComputeReply] = {g: p.value for g, p in procs.items() if p.value is not None}
            if any(r.status == "diverged" for r in replies.values()):
                report.status, report.reason = "diverged", f"non-finite loss at step {step}"
                break
            lost_now = {g: chunks[g] for g in active if g not in replies}
            computed = [g for g in active if g in replies]
            if not computed:
                handle_rank_loss(ledger, lost_now, step)
                report.status, report.reason = "aborted", f"every rank lost at step {step}"
                break
            result = yield from collective.run_session(computed, key, config.parameter_count)
            for g in computed:
                if g not in result.included:
                    lost_now[g] = chunks[g]
            deferred = handle_rank_loss(ledger, lost_now, step)
            report.lost = sorted(collective.lost)
            if not result.ok or result.vector is None:
                report.status, report.reason = "aborted", f"all-reduce failed at step {step}"
                break

            n = sum(replies[g].n for g in result.included)
            overflow = not bool(np.all(np.isfinite(result.vector)))
            scale = scaler.scale
            skip = scaler.update(overflow) if config.mixed else False
            if overflow and not config.mixed:
                report.status, report.reason = "diverged", f"non-finite gradient at step {step}"
                break
            update = ApplyUpdate(step=step, session=result.session, n=n, scale=scale, skip=skip)
            applies = [self.node.spawn(collective.propose(g, update)) for g in result.included]
            yield self.node.sim.env.all_of(applies)
            for g in result.included:
                ledger.complete(chunks[g])
            if skip:
                report.skipped_steps += 1

            for g in result.included:
                reply = replies[g]
                if reply.n == 0 or reply.worker is None:
                    continue
                units = vcu(self.t_b, profiles[reply.worker].compute_ms, reply.n)
                report.vcu_awarded += units
                self.node.send(
                    self.ledger_address,
                    CoinAward(
                        channel=RewardKind.TRAINING_STEP,
                        peer=reply.worker,
                        basis=units,
                        key=f"train:{job.name}:{step}:{g}",
                    ),
                )

            loss = sum(replies[g].loss for g in result.included) / max(n, 1)
            report.losses.append(loss)
            report.steps = step + 1
            self.node.emit("train.loss", {"job": job.name, "step": step, "loss": loss})
            self.node.emit("train.step_ms", {"job": job.name, "step": step, "ms": self.node.now - started})
            self.node.emit("train.deferred_chunks", {"job": job.name, "step": step, "samples": deferred})

        self.node.emit("train.job", {"job": job.name, "status": report.status, "steps": report.steps})
        log.info(f"job {job.name} {report.status} after {report.steps} steps")
        return report
