"""
Fault-tolerant recursive halving/doubling all-reduce.

Every logical rank is a Raft group. The rank's leader drives the exchange
schedule and commits each step into the group's log, so that a newly elected
leader resumes at the last committed step and answers retried exchanges from
the committed record instead of reducing twice.

Pairing uses rank XOR distance: the distance starts at P/2 and halves during
scatter-reduce, then starts at 1 and doubles during all-gather. In each pair
the lower position keeps the bottom half of its window and sends the top half.

The coordinator (the training initiator) keeps the latest known leader of every
rank group. Drivers ask it when a partner stops answering; after
REFRESH_CYCLES probe rounds without a live leader the rank is lost, the session
is aborted and restarted over the surviving ranks with their staged inputs.
Rank counts that are not a power of two are padded with zero-valued virtual
ranks hosted in the coordinator's memory.

See: docs/adr/ADR-002-raft-backed-allreduce.md
"""

import logging
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np
import simpy
from pydantic import BaseModel, ConfigDict

from hydrasim.config import ELECTION_TIMEOUT_MAX_MS, REFRESH_CYCLES
from hydrasim.models import Ack, HydraError, Message
from hydrasim.raft import ClientPropose, ClientReply, LogEntry, RaftMember, RaftProbe, RaftProbeReply, RaftService
from hydrasim.sim import Envelope, Node, Process

log = logging.getLogger(__name__)

Phase = Literal["scatter_reduce", "all_gather"]
Window = tuple[int, int]

SCATTER: Phase = "scatter_reduce"
GATHER: Phase = "all_gather"


class AllReduceError(HydraError):
    pass


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def padded_size(ranks: int) -> int:
    if ranks < 1:
        raise AllReduceError("need at least one rank")
    return 1 << (ranks - 1).bit_length()


def padded_length(length: int, size: int) -> int:
    return -(-length // size) * size


def log2(size: int) -> int:
    if not is_power_of_two(size):
        raise AllReduceError(f"{size} ranks is not a power of two")
    return size.bit_length() - 1


def pairing(rank: int, step: int, phase: Phase, size: int) -> int:
    """Partner of `rank` at `step` of `phase` among `size` ranks."""
    steps = log2(size)
    if not 0 <= rank < size:
        raise AllReduceError(f"rank {rank} outside [0, {size})")
    if not 0 <= step < steps:
        raise AllReduceError(f"step {step} outside [0, {steps})")
    distance = size >> (step + 1) if phase == SCATTER else 1 << step
    return rank ^ distance


def schedule(size: int) -> list[tuple[Phase, int]]:
    steps = log2(size)
    return [(SCATTER, s) for s in range(steps)] + [(GATHER, s) for s in range(steps)]


def scatter_windows(position: int, size: int, length: int) -> list[Window]:
    """Window held by `position` before scatter step 0, then after each scatter step."""
    windows: list[Window] = [(0, length)]
    lo, hi = 0, length
    for step in range(log2(size)):
        partner = pairing(position, step, SCATTER, size)
        mid = (lo + hi) // 2
        lo, hi = (lo, mid) if position < partner else (mid, hi)
        windows.append((lo, hi))
    return windows


@dataclass(frozen=True)
class ExchangePlan:
    partner: int
    send: Window
    recv: Window
    phase: Phase


def exchange_plan(position: int, ordinal: int, size: int, length: int) -> ExchangePlan:
    """What `position` sends and which window it overwrites or reduces at `ordinal`."""
    phase, step = schedule(size)[ordinal]
    partner = pairing(position, step, phase, size)
    steps = log2(size)
    if phase == SCATTER:
        before = scatter_windows(position, size, length)[step]
        kept = scatter_windows(position, size, length)[step + 1]
        lo, hi = before
        send = (kept[1], hi) if kept[0] == lo else (lo, kept[0])
        return ExchangePlan(partner, send, kept, phase)
    level = steps - step
    mine = scatter_windows(position, size, length)[level]
    theirs = scatter_windows(partner, size, length)[level]
    return ExchangePlan(partner, mine, theirs, phase)


def halving_doubling(vectors: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Run the exchange schedule in memory; returns every rank's final vector."""
    size = len(vectors)
    length = len(vectors[0])
    if any(len(v) != length for v in vectors):
        raise AllReduceError("vectors must have equal length")
    if not is_power_of_two(size):
        raise AllReduceError("in-memory reduction needs a power-of-two rank count")
    if length % size:
        raise AllReduceError(f"length {length} not divisible by {size}")
    state = [np.array(v, copy=True) for v in vectors]
    for ordinal in range(len(schedule(size))):
        plans = [exchange_plan(p, ordinal, size, length) for p in range(size)]
        outgoing = [state[p][slice(*plans[p].send)].copy() for p in range(size)]
        for p, plan in enumerate(plans):
            received = outgoing[plan.partner]
            if plan.phase == SCATTER:
                state[p][slice(*plan.recv)] += received
            else:
                state[p][slice(*plan.recv)] = received
    return state


# replicated commands


class _Command(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)


class StageInput(_Command):
    op: Literal["stage_input"] = "stage_input"
    key: str
    vector: np.ndarray
    n: int = 0


class BeginSession(_Command):
    op: Literal["begin_session"] = "begin_session"
    session: str
    position: int
    size: int
    length: int
    input_key: str
    ranks: tuple[str, ...]
    addresses: tuple[int, ...]
    coordinator: int


class CommitStep(_Command):
    op: Literal["commit_step"] = "commit_step"
    session: str
    ordinal: int
    received: np.ndarray


class AbortSession(_Command):
    op: Literal["abort_session"] = "abort_session"
    session: str


@dataclass
class StagedInput:
    vector: np.ndarray
    n: int


@dataclass
class SessionState:
    begin: BeginSession
    vector: np.ndarray
    original_length: int
    ordinal: int = 0
    records: dict[int, np.ndarray] = field(default_factory=dict)
    status: Literal["running", "done", "aborted"] = "running"

    @property
    def steps(self) -> int:
        return 2 * log2(self.begin.size)

    def result(self) -> np.ndarray:
        return self.vector[: self.original_length]


class RankStateMachine:
    """Replicated state of one rank: staged inputs and per-session exchange progress."""

    def __init__(self) -> None:
        self.staged: dict[str, StagedInput] = {}
        self.sessions: dict[str, SessionState] = {}

    def apply(self, index: int, command: Any) -> Any:
        match command:
            case StageInput():
                self.staged[command.key] = StagedInput(np.array(command.vector, copy=True), command.n)
                return command.n
            case BeginSession():
                return self._begin(command)
            case CommitStep():
                return self._commit(command)
            case AbortSession():
                state = self.sessions.get(command.session)
                if state is not None and state.status == "running":
                    state.status = "aborted"
                return None
        return self.apply_other(index, command)

    def apply_other(self, index: int, command: Any) -> Any:
        raise AllReduceError(f"unknown rank command {command!r}")

    def _begin(self, begin: BeginSession) -> str:
        existing = self.sessions.get(begin.session)
        if existing is not None:
            return begin.session
        staged = self.staged.get(begin.input_key)
        if staged is None:
            raise AllReduceError(f"session {begin.session} references unstaged input {begin.input_key}")
        original = len(staged.vector)
        vector = np.zeros(begin.length, dtype=staged.vector.dtype)
        vector[:original] = staged.vector
        state = SessionState(begin, vector, original)
        if begin.size == 1:
            state.status = "done"
        self.sessions[begin.session] = state
        return begin.session

    def _commit(self, cmd: CommitStep) -> np.ndarray | None:
        state = self.sessions.get(cmd.session)
        if state is None or state.status == "aborted":
            return None
        if cmd.ordinal < state.ordinal:
            return state.records[cmd.ordinal]
        if cmd.ordinal > state.ordinal:
            raise AllReduceError(f"{cmd.session}: step {cmd.ordinal} committed before {state.ordinal}")
        begin = state.begin
        plan = exchange_plan(begin.position, cmd.ordinal, begin.size, begin.length)
        sent = state.vector[slice(*plan.send)].copy()
        if plan.phase == SCATTER:
            state.vector[slice(*plan.recv)] += cmd.received
        else:
            state.vector[slice(*plan.recv)] = cmd.received
        state.records[cmd.ordinal] = sent
        state.ordinal += 1
        if state.ordinal == state.steps:
            state.status = "done"
        return sent


# wire messages


class HostRank(Message):
    kind: Literal["HOST_RANK"] = "HOST_RANK"
    group: str
    members: tuple[int, ...]
    coordinator: int
    job: Any = None
    campaign: bool = False


class Exchange(Message):
    kind: Literal["EXCHANGE"] = "EXCHANGE"
    group: str
    session: str
    ordinal: int
    segment: np.ndarray


class ExchangeAck(Message):
    kind: Literal["EXCHANGE_ACK"] = "EXCHANGE_ACK"
    session: str
    ordinal: int
    status: Literal["ok", "redirect", "busy", "aborted", "unknown"]
    segment: np.ndarray | None = None
    leader_hint: int | None = None


class LeaderQuery(Message):
    kind: Literal["LEADER_QUERY"] = "LEADER_QUERY"
    group: str
    suspect: int | None = None


class RankLeaderInfo(Message):
    kind: Literal["RANK_LEADER_INFO"] = "RANK_LEADER_INFO"
    group: str
    leader: int | None
    lost: bool = False


class LeaderNotice(Message):
    kind: Literal["LEADER_NOTICE"] = "LEADER_NOTICE"
    group: str
    leader: int
    term: int


class SessionDone(Message):
    kind: Literal["SESSION_DONE"] = "SESSION_DONE"
    session: str
    group: str
    position: int
    vector: np.ndarray


def refresh_budget(node: Node) -> int:
    """Upper bound on one coordinator leader refresh."""
    return REFRESH_CYCLES * (node.sim.rpc_timeout + ELECTION_TIMEOUT_MAX_MS) + 2 * node.sim.rpc_timeout


class _Endpoint:
    """Responder side shared by replicated and virtual ranks."""

    node: Node
    group: str

    def session(self, session: str) -> SessionState | None:
        raise NotImplementedError

    def serving(self) -> tuple[bool, int | None]:
        return True, None

    def progress(self) -> simpy.Event:
        raise NotImplementedError

    def commit(self, cmd: CommitStep) -> Process:
        raise NotImplementedError

    def respond(self, msg: Exchange) -> Process:
        wait_limit = self.node.sim.rpc_timeout
        deadline = self.node.now + wait_limit
        while True:
            ok, hint = self.serving()
            if not ok:
                return ExchangeAck(session=msg.session, ordinal=msg.ordinal, status="redirect", leader_hint=hint)
            state = self.session(msg.session)
            if state is not None and state.status == "aborted":
                return ExchangeAck(session=msg.session, ordinal=msg.ordinal, status="aborted")
            if state is not None and msg.ordinal < state.ordinal:
                return ExchangeAck(
                    session=msg.session, ordinal=msg.ordinal, status="ok", segment=state.records[msg.ordinal].copy()
                )
            if state is not None and msg.ordinal == state.ordinal:
                sent = yield from self.commit(
                    CommitStep(session=msg.session, ordinal=msg.ordinal, received=msg.segment)
                )
                if sent is None:
                    return ExchangeAck(session=msg.session, ordinal=msg.ordinal, status="busy")
                return ExchangeAck(session=msg.session, ordinal=msg.ordinal, status="ok", segment=sent.copy())
            remaining = deadline - self.node.now
            if remaining <= 0:
                return ExchangeAck(session=msg.session, ordinal=msg.ordinal, status="busy")
            yield self.progress() | self.node.sleep(remaining)


class ReplicatedRank(_Endpoint):
    def __init__(self, node: Node, member: RaftMember, coordinator: int):
        self.node = node
        self.member = member
        self.group = member.group
        self.coordinator = coordinator

    @property
    def machine(self) -> RankStateMachine:
        return self.member.state_machine  # type: ignore[return-value]

    def session(self, session: str) -> SessionState | None:
        return self.machine.sessions.get(session)

    def serving(self) -> tuple[bool, int | None]:
        return self.member.is_leader, self.member.leader_id

    def progress(self) -> simpy.Event:
        return self.member.applied()

    def commit(self, cmd: CommitStep) -> Process:
        outcome = yield from self.member.propose_within(cmd)
        return outcome.result if outcome.committed else None


class VirtualRanks:
    """Zero-input padding ranks of one session, kept in the coordinator's memory."""

    def __init__(self, node: Node, begin_template: BeginSession, positions: list[int]):
        self.node = node
        self.machines: dict[int, RankStateMachine] = {}
        self._progress = node.event()
        for position in positions:
            machine = RankStateMachine()
            machine.apply(0, StageInput(key=begin_template.input_key, vector=np.zeros(begin_template.length)))
            machine.apply(0, begin_template.model_copy(update={"position": position}))
            self.machines[position] = machine
        self.settle()

    def endpoint(self, position: int) -> "VirtualRank":
        return VirtualRank(self, position)

    def progress(self) -> simpy.Event:
        return self._progress

    def apply(self, position: int, cmd: CommitStep) -> np.ndarray | None:
        sent = self.machines[position].apply(0, cmd)
        self.settle()
        return sent

    def settle(self) -> None:
        """Advance every step where both partners are virtual."""
        moved = True
        while moved:
            moved = False
            for position, machine in self.machines.items():
                state = next(iter(machine.sessions.values()))
                if state.status != "running":
                    continue
                plan = exchange_plan(position, state.ordinal, state.begin.size, state.begin.length)
                other = self.machines.get(plan.partner)
                if other is None or position > plan.partner:
                    continue
                other_state = next(iter(other.sessions.values()))
                if other_state.ordinal != state.ordinal:
                    continue
                their_plan = exchange_plan(plan.partner, state.ordinal, state.begin.size, state.begin.length)
                theirs = other_state.vector[slice(*their_plan.send)].copy()
                mine = state.vector[slice(*plan.send)].copy()
                session = state.begin.session
                machine.apply(0, CommitStep(session=session, ordinal=state.ordinal, received=theirs))
                other.apply(0, CommitStep(session=session, ordinal=other_state.ordinal, received=mine))
                moved = True
        fired, self._progress = self._progress, self.node.event()
        fired.succeed()

    def abort(self) -> None:
        for machine in self.machines.values():
            for state in machine.sessions.values():
                if state.status == "running":
                    state.status = "aborted"
        self.settle()


class VirtualRank(_Endpoint):
    def __init__(self, ranks: VirtualRanks, position: int):
        self.ranks = ranks
        self.position = position
        self.node = ranks.node

    def session(self, session: str) -> SessionState | None:
        return self.ranks.machines[self.position].sessions.get(session)

    def progress(self) -> simpy.Event:
        return self.ranks.progress()

    def commit(self, cmd: CommitStep) -> Process:
        sent = self.ranks.apply(self.position, cmd)
        yield self.node.sleep(0)
        return sent


class RankService:
    """Hosts rank groups on a node, drives their sessions and answers exchanges."""

    def __init__(self, node: Node, raft: RaftService):
        self.node = node
        self.raft = raft
        self.ranks: dict[str, ReplicatedRank] = {}
        self.virtual: dict[str, _Endpoint] = {}
        self.machine_factory: Callable[[HostRank], Callable[[], RankStateMachine]] = lambda _msg: RankStateMachine
        self._drivers: dict[tuple[str, str], simpy.Process] = {}
        self.exchanges_sent = 0
        node.on(HostRank, self._on_host)
        node.on(Exchange, self._on_exchange)
        node.on_crash(self._drivers.clear)

    def host(self, msg: HostRank) -> RaftMember:
        member = self.raft.join(msg.group, list(msg.members), self.machine_factory(msg), campaign=msg.campaign)
        if msg.group not in self.ranks:
            rank = ReplicatedRank(self.node, member, msg.coordinator)
            self.ranks[msg.group] = rank
            member.on_leader.append(lambda m, r=rank: self._on_leader(r))
            member.on_apply.append(lambda m, entry, result, r=rank: self._on_apply(r, entry))
        return member

    def _on_host(self, envelope: Envelope) -> Ack:
        self.host(envelope.payload)  # type: ignore[arg-type]
        return Ack()

    def _on_exchange(self, envelope: Envelope) -> Any:
        msg: Exchange = envelope.payload  # type: ignore[assignment]
        endpoint: _Endpoint | None = self.ranks.get(msg.group) or self.virtual.get(msg.group)
        if endpoint is None:
            return ExchangeAck(session=msg.session, ordinal=msg.ordinal, status="unknown")
        return endpoint.respond(msg)

    def _on_leader(self, rank: ReplicatedRank) -> None:
        self.node.send(
            rank.coordinator, LeaderNotice(group=rank.group, leader=self.node.node_id, term=rank.member.current_term)
        )
        self.node.spawn(self._resume(rank))

    def _resume(self, rank: ReplicatedRank) -> Process:
        ready = yield rank.member.ready()
        if not ready:
            return None
        for session, state in list(rank.machine.sessions.items()):
            if state.status != "aborted":
                self._start_driver(rank, session)
        return None

    def _on_apply(self, rank: ReplicatedRank, entry: LogEntry) -> None:
        if not isinstance(entry.command, BeginSession) or not rank.member.is_leader:
            return
        ready = rank.member.ready()
        if ready.triggered and ready.value:
            self._start_driver(rank, entry.command.session)

    def _start_driver(self, rank: ReplicatedRank, session: str) -> None:
        key = (rank.group, session)
        running = self._drivers.get(key)
        if running is not None and running.is_alive:
            return
        self._drivers[key] = self.node.spawn(self.drive(rank, session))

    def drive(self, rank: ReplicatedRank, session: str) -> Process:
        """Walk the exchange schedule for one rank as its leader."""
        member = rank.member
        state = rank.session(session)
        if state is None:
            return None
        begin = state.begin
        leaders = dict(enumerate(begin.addresses))
        plan_count = state.steps
        exchange_timeout = 2 * self.node.sim.rpc_timeout
        # a responder only suspects its initiator after several exchange rounds of silence
        patience = 4 * exchange_timeout
        while state.status == "running" and member.is_leader and state.ordinal < plan_count:
            ordinal = state.ordinal
            plan = exchange_plan(begin.position, ordinal, begin.size, begin.length)
            partner = plan.partner
            partner_group = self._group_of(begin, partner)
            if begin.position < partner:
                self.exchanges_sent += 1
                self.node.emit("allreduce.exchange", {"session": session, "ordinal": ordinal})
                reply = yield self.node.request(
                    leaders[partner],
                    Exchange(
                        group=partner_group,
                        session=session,
                        ordinal=ordinal,
                        segment=state.vector[slice(*plan.send)].copy(),
                    ),
                    exchange_timeout,
                )
                if isinstance(reply, ExchangeAck) and reply.status == "ok":
                    yield from member.propose_within(
                        CommitStep(session=session, ordinal=ordinal, received=reply.segment)
                    )
                    state = rank.session(session) or state
                    continue
                if isinstance(reply, ExchangeAck) and reply.status == "aborted":
                    break
                if isinstance(reply, ExchangeAck) and reply.status == "busy":
                    continue
                if isinstance(reply, ExchangeAck) and reply.status == "redirect" and reply.leader_hint is not None:
                    leaders[partner] = reply.leader_hint
                    continue
                address = yield from self._refresh(begin, partner_group, leaders[partner])
                if address is None:
                    break
                leaders[partner] = address
            else:
                progressed = rank.progress()
                yield progressed | self.node.sleep(patience)
                state = rank.session(session) or state
                if state.ordinal > ordinal or state.status != "running":
                    continue
                if not progressed.triggered:
                    address = yield from self._refresh(begin, partner_group, leaders[partner])
                    if address is None:
                        break
                    leaders[partner] = address
        if state.status == "done" and member.is_leader:
            yield from self._report(rank, state)
        return state.status

    @staticmethod
    def _group_of(begin: BeginSession, position: int) -> str:
        if position < len(begin.ranks):
            return begin.ranks[position]
        return f"virtual:{begin.session}:{position}"

    def _refresh(self, begin: BeginSession, group: str, suspect: int) -> Process:
        if group.startswith("virtual:"):
            return begin.coordinator
        reply = yield self.node.request(
            begin.coordinator, LeaderQuery(group=group, suspect=suspect), refresh_budget(self.node)
        )
        if isinstance(reply, RankLeaderInfo) and not reply.lost:
            return reply.leader if reply.leader is not None else suspect
        if isinstance(reply, RankLeaderInfo) and reply.lost:
            return None
        # coordinator silent; keep trying the old address
        return suspect

    def _report(self, rank: ReplicatedRank, state: SessionState) -> Process:
        begin = state.begin
        done = SessionDone(session=begin.session, group=rank.group, position=begin.position, vector=state.result())
        for _ in range(REFRESH_CYCLES):
            ack = yield self.node.request(begin.coordinator, done)
            if isinstance(ack, Ack):
                return True
        log.warning(f"rank {rank.group} could not report {begin.session} to the coordinator")
        return False


@dataclass
class SessionResult:
    vector: np.ndarray | None
    included: list[str]
    lost: list[str]
    attempts: int
    session: str | None = None

    @property
    def ok(self) -> bool:
        return self.vector is not None


@dataclass
class _Watch:
    session: str
    ranks: list[str]
    results: dict[int, np.ndarray] = field(default_factory=dict)
    lost: set[str] = field(default_factory=set)
    changed: simpy.Event | None = None


class CollectiveCoordinator:
    """Leader cache, rank-loss detection and session (re)starts for one job's rank groups."""

    def __init__(self, node: Node, ranks: RankService, groups: dict[str, list[int]]):
        self.node = node
        self.rank_service = ranks
        self.groups = groups
        self.leaders: dict[str, tuple[int, int]] = {}
        self.lost: set[str] = set()
        self._refreshing: dict[str, simpy.Event] = {}
        self._watches: dict[str, _Watch] = {}
        self._sessions = 0
        self.tag = f"job{node.node_id}"
        node.on(LeaderQuery, self._on_leader_query)
        node.on(LeaderNotice, self._on_leader_notice)
        node.on(SessionDone, self._on_session_done)

    def seed_leader(self, group: str, address: int) -> None:
        self.leaders.setdefault(group, (0, address))

    def leader(self, group: str) -> int | None:
        cached = self.leaders.get(group)
        return None if cached is None else cached[1]

    # leader cache

    def _on_leader_notice(self, envelope: Envelope) -> None:
        msg: LeaderNotice = envelope.payload  # type: ignore[assignment]
        cached = self.leaders.get(msg.group)
        if cached is None or msg.term >= cached[0]:
            self.leaders[msg.group] = (msg.term, msg.leader)

    def _on_leader_query(self, envelope: Envelope) -> Process:
        msg: LeaderQuery = envelope.payload  # type: ignore[assignment]
        address = yield from self.leader_refresh(msg.group, msg.suspect)
        return RankLeaderInfo(group=msg.group, leader=address, lost=address is None)

    def leader_refresh(self, group: str, suspect: int | None = None) -> Process:
        """Latest leader of `group`; probes the members when the cached one is suspect."""
        if group in self.lost:
            return None
        cached = self.leader(group)
        if cached is not None and cached != suspect:
            return cached
        pending = self._refreshing.get(group)
        if pending is not None:
            result = yield pending
            return result
        pending = self.node.event()
        self._refreshing[group] = pending
        address = None
        try:
            address = yield from self._probe_cycles(group)
        finally:
            self._refreshing.pop(group, None)
            pending.succeed(address)
        if address is None:
            self._declare_lost(group)
        return address

    def _probe_cycles(self, group: str) -> Process:
        members = self.groups.get(group, [])
        for cycle in range(REFRESH_CYCLES):
            replies = yield from self.node.collect([self.node.request(m, RaftProbe(group=group)) for m in members])
            leaders = [
                (r.term, m) for m, r in zip(members, replies) if isinstance(r, RaftProbeReply) and r.is_leader
            ]
            if leaders:
                term, address = max(leaders)
                self.leaders[group] = (term, address)
                return address
            if cycle + 1 < REFRESH_CYCLES:
                yield self.node.sleep(ELECTION_TIMEOUT_MAX_MS)
        return None

    def _declare_lost(self, group: str) -> None:
        if group in self.lost:
            return
        self.lost.add(group)
        self.node.emit("allreduce.rank_lost", {"group": group})
        log.warning(f"t={self.node.now} rank group {group} lost")
        for watch in self._watches.values():
            if group in watch.ranks:
                watch.lost.add(group)
                self._poke(watch)

    @staticmethod
    def _poke(watch: _Watch) -> None:
        if watch.changed is not None and not watch.changed.triggered:
            watch.changed.succeed()

    def _on_session_done(self, envelope: Envelope) -> Ack:
        msg: SessionDone = envelope.payload  # type: ignore[assignment]
        watch = self._watches.get(msg.session)
        if watch is not None:
            watch.results[msg.position] = np.array(msg.vector, copy=True)
            self._poke(watch)
        return Ack()

    # sessions

    def _propose(self, group: str, command: Any) -> Process:
        """Commit `command` on a rank group; None once the group is lost."""
        address = self.leader(group)
        for _ in range(2 * REFRESH_CYCLES):
            if group in self.lost:
                return None
            if address is None:
                address = yield from self.leader_refresh(group)
                if address is None:
                    return None
            reply = yield self.node.request(address, ClientPropose(group=group, command=command), refresh_budget(self.node))
            if isinstance(reply, ClientReply) and reply.status == "committed":
                return reply
            if isinstance(reply, ClientReply) and reply.status == "redirect" and reply.leader_hint not in (None, address):
                address = reply.leader_hint
                continue
            address = yield from self.leader_refresh(group, suspect=address)
        return None

    def propose(self, group: str, command: Any) -> Process:
        return self._propose(group, command)

    def run_session(self, ranks: list[str], input_key: str, length: int) -> Process:
        """All-reduce the inputs staged under `input_key`, restarting over survivors on rank loss."""
        active = [g for g in ranks if g not in self.lost]
        attempts = 0
        while active:
            attempts += 1
            self._sessions += 1
            session = f"{self.tag}:{input_key}:{self._sessions}"
            size = padded_size(len(active))
            full_length = padded_length(length, size)
            addresses = tuple(self.leader(g) or self.node.node_id for g in active) + (self.node.node_id,) * (
                size - len(active)
            )
            template = BeginSession(
                session=session,
                position=0,
                size=size,
                length=full_length,
                input_key=input_key,
                ranks=tuple(active),
                addresses=addresses,
                coordinator=self.node.node_id,
            )
            watch = _Watch(session, list(active))
            self._watches[session] = watch
            virtual = None
            if size > len(active):
                virtual = VirtualRanks(self.node, template, list(range(len(active), size)))
                for position in range(len(active), size):
                    self.rank_service.virtual[f"virtual:{session}:{position}"] = virtual.endpoint(position)
            self.node.emit("allreduce.session_start", {"session": session, "ranks": len(active), "size": size})

            starts = [
                self.node.spawn(self._propose(g, template.model_copy(update={"position": p})))
                for p, g in enumerate(active)
            ]
            yield self.node.sim.env.all_of(starts)
            for group, proc in zip(active, starts):
                if proc.value is None:
                    watch.lost.add(group)

            while not watch.lost and len(watch.results) < len(active):
                watch.changed = self.node.event()
                yield watch.changed
            self._watches.pop(session, None)
            if virtual is not None:
                virtual.abort()
                for position in range(len(active), size):
                    self.rank_service.virtual.pop(f"virtual:{session}:{position}", None)

            if watch.lost:
                for group in watch.lost:
                    self._declare_lost(group)
                survivors = [g for g in active if g not in watch.lost]
                for group in survivors:
                    self.node.spawn(self._propose(group, AbortSession(session=session)))
                self.node.emit("allreduce.session_aborted", {"session": session, "lost": sorted(watch.lost)})
                active = survivors
                continue

            vector = watch.results[0][:length]
            for position, other in watch.results.items():
                if not np.array_equal(other[:length], vector):
                    raise AllReduceError(f"{session}: rank {position} disagrees on the reduced vector")
            self.node.emit("allreduce.session_done", {"session": session, "ranks": len(active)})
            return SessionResult(vector, active, [g for g in ranks if g not in active], attempts, session)
        return SessionResult(None, [], list(ranks), attempts)
