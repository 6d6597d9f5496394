"""
Raft consensus for replica groups.

Each RaftMember replicates a log of commands into a state machine. Several
groups can share one node; RaftService routes messages to members by group id.

Durable across a crash: current term, vote and log. Volatile: role, commit
and apply progress, and the state machine, which is rebuilt by re-applying
committed entries once a leader re-advertises the commit index.

Group membership is the initial member list with every MemberReplace entry in
the log applied in order, committed or not.

See: docs/adr/ADR-002-raft-backed-allreduce.md
"""

import logging
from collections import defaultdict
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Literal, Protocol

import numpy as np
import simpy
from pydantic import BaseModel, ConfigDict

from hydrasim.config import (
    APPEND_BATCH_LIMIT,
    ELECTION_TIMEOUT_MAX_MS,
    ELECTION_TIMEOUT_MIN_MS,
    HEARTBEAT_INTERVAL_MS,
    PROPOSE_TIMEOUT_MS,
)
from hydrasim.metrics import MetricsSink
from hydrasim.models import HydraError, Message
from hydrasim.sim import Envelope, Node, Process

log = logging.getLogger(__name__)


class RaftError(HydraError):
    pass


class RaftRole(str, Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


class NoOp(BaseModel):
    model_config = ConfigDict(frozen=True)

    op: Literal["noop"] = "noop"


class MemberReplace(BaseModel):
    """Swap `old` for `new` in one entry; either side may be absent."""

    model_config = ConfigDict(frozen=True)

    op: Literal["member_replace"] = "member_replace"
    old: int | None = None
    new: int | None = None


@dataclass(frozen=True, slots=True)
class LogEntry:
    term: int
    index: int
    command: Any


class StateMachine(Protocol):
    def apply(self, index: int, command: Any) -> Any: ...


class RequestVote(Message):
    kind: Literal["REQUEST_VOTE"] = "REQUEST_VOTE"
    group: str
    term: int
    candidate: int
    last_log_index: int
    last_log_term: int


class VoteReply(Message):
    kind: Literal["VOTE_REPLY"] = "VOTE_REPLY"
    group: str
    term: int
    voter: int
    granted: bool


class AppendEntries(Message):
    kind: Literal["APPEND_ENTRIES"] = "APPEND_ENTRIES"
    group: str
    term: int
    leader: int
    prev_log_index: int
    prev_log_term: int
    entries: tuple[LogEntry, ...] = ()
    leader_commit: int


class AppendReply(Message):
    kind: Literal["APPEND_REPLY"] = "APPEND_REPLY"
    group: str
    term: int
    follower: int
    success: bool
    match_index: int = 0
    conflict_index: int = 0


class ClientPropose(Message):
    kind: Literal["CLIENT_PROPOSE"] = "CLIENT_PROPOSE"
    group: str
    command: Any


class ClientReply(Message):
    kind: Literal["CLIENT_REPLY"] = "CLIENT_REPLY"
    group: str
    status: Literal["committed", "redirect", "timeout", "unknown_group"]
    index: int | None = None
    result: Any = None
    leader_hint: int | None = None


class RaftProbe(Message):
    kind: Literal["RAFT_PROBE"] = "RAFT_PROBE"
    group: str


class RaftProbeReply(Message):
    kind: Literal["RAFT_PROBE_REPLY"] = "RAFT_PROBE_REPLY"
    group: str
    term: int
    is_leader: bool
    leader_hint: int | None = None


@dataclass(slots=True)
class ProposeOutcome:
    status: Literal["committed", "redirect", "lost", "timeout"]
    index: int | None = None
    result: Any = None
    leader_hint: int | None = None

    @property
    def committed(self) -> bool:
        return self.status == "committed"


class RaftMonitor:
    """Watches every group for election-safety and state-machine-safety violations."""

    def __init__(self, metrics: MetricsSink | None = None):
        self.metrics = metrics
        self.leaders: dict[tuple[str, int], int] = {}
        self.applied: dict[tuple[str, int], int] = {}
        self.elections: dict[str, int] = defaultdict(int)
        self.violations: list[str] = []

    def _violation(self, time: int, text: str) -> None:
        self.violations.append(text)
        log.error(f"raft safety violation: {text}")
        if self.metrics is not None:
            self.metrics.emit(time, None, "raft.safety_violation", text)

    def record_leader(self, time: int, group: str, term: int, node: int) -> None:
        holder = self.leaders.setdefault((group, term), node)
        if holder != node:
            self._violation(time, f"{group} term {term} has leaders {holder} and {node}")
        self.elections[group] += 1

    def record_apply(self, time: int, group: str, entry: LogEntry, node: int) -> None:
        term = self.applied.setdefault((group, entry.index), entry.term)
        if term != entry.term:
            self._violation(
                time, f"{group} index {entry.index} applied with terms {term} and {entry.term} (node {node})"
            )

    @property
    def ok(self) -> bool:
        return not self.violations


def check_log_matching(logs: list[list[LogEntry]]) -> list[str]:
    """Pairs of logs that share an (index, term) but differ somewhere before it."""
    problems: list[str] = []
    for a in range(len(logs)):
        for b in range(a + 1, len(logs)):
            la, lb = logs[a], logs[b]
            shared = min(len(la), len(lb))
            last_match = 0
            for i in range(shared):
                if la[i].term == lb[i].term:
                    last_match = i + 1
            for i in range(last_match):
                if la[i].term != lb[i].term or type(la[i].command) is not type(lb[i].command):
                    problems.append(f"logs {a} and {b} diverge at index {i + 1} below a matching entry")
                    break
    return problems


@dataclass
class _Waiter:
    term: int
    event: simpy.Event


@dataclass
class _Volatile:
    role: RaftRole = RaftRole.FOLLOWER
    leader_id: int | None = None
    commit_index: int = 0
    last_applied: int = 0
    votes: set[int] = field(default_factory=set)
    next_index: dict[int, int] = field(default_factory=dict)
    match_index: dict[int, int] = field(default_factory=dict)
    last_ack: dict[int, int] = field(default_factory=dict)
    timer_token: int = 0
    ready_index: int = 0


class RaftMember:
    """One member of one group, hosted on `node`."""

    def __init__(
        self,
        node: Node,
        group: str,
        members: list[int],
        state_machine: Callable[[], StateMachine],
        *,
        monitor: RaftMonitor | None = None,
        rng: np.random.Generator | None = None,
    ):
        if not members:
            raise RaftError(f"{group} needs at least one member")
        self.node = node
        self.group = group
        self.initial_members = list(members)
        self.members: list[int] = list(members)
        self.make_state_machine = state_machine
        self.state_machine: StateMachine = state_machine()
        self.monitor = monitor
        self.rng = rng or node.rng(f"raft:{group}")
        # durable
        self.current_term = 0
        self.voted_for: int | None = None
        self.log: list[LogEntry] = []
        # volatile
        self.v = _Volatile()
        self._waiters: dict[int, _Waiter] = {}
        self._ready: simpy.Event | None = None
        self._applied_event: simpy.Event = node.event()
        self.stopped = False
        self.on_leader: list[Callable[["RaftMember"], None]] = []
        self.on_apply: list[Callable[["RaftMember", LogEntry, Any], None]] = []
        self.on_client_commit: Callable[[Any, Any], None] | None = None

    def __repr__(self) -> str:
        return f"<RaftMember {self.group}@{self.node.node_id} {self.role.value} t{self.current_term}>"

    # views

    @property
    def role(self) -> RaftRole:
        return self.v.role

    @property
    def is_leader(self) -> bool:
        return self.v.role is RaftRole.LEADER and self.node.online and not self.stopped

    @property
    def leader_id(self) -> int | None:
        return self.node.node_id if self.is_leader else self.v.leader_id

    @property
    def commit_index(self) -> int:
        return self.v.commit_index

    @property
    def last_applied(self) -> int:
        return self.v.last_applied

    @property
    def last_index(self) -> int:
        return len(self.log)

    @property
    def last_term(self) -> int:
        return self.log[-1].term if self.log else 0

    def last_ack(self, member: int) -> int | None:
        return self.v.last_ack.get(member)

    def _majority(self) -> int:
        return len(self.members) // 2 + 1

    def _others(self) -> list[int]:
        return [m for m in self.members if m != self.node.node_id]

    # lifecycle

    def start(self, *, campaign: bool = False) -> None:
        """Arm the election timer; `campaign` starts an election right away."""
        if campaign:
            self.node.after(0, self.on_election_timeout)
        else:
            self._reset_election_timer()

    def stop(self) -> None:
        self.stopped = True
        self.v.timer_token += 1
        self.v.role = RaftRole.FOLLOWER

    def crash(self) -> None:
        self.v = _Volatile(timer_token=self.v.timer_token + 1)
        self._waiters.clear()
        self._ready = None
        self._applied_event = self.node.event()
        self.state_machine = self.make_state_machine()
        self._recompute_members()

    def restart(self) -> None:
        if not self.stopped:
            self._reset_election_timer()

    def install(self, term: int, log_entries: list[LogEntry]) -> None:
        """Adopt a transferred log before joining the group."""
        self.current_term = max(self.current_term, term)
        self.log = list(log_entries)
        self._recompute_members()

    def _recompute_members(self) -> None:
        members = list(self.initial_members)
        for entry in self.log:
            cmd = entry.command
            if isinstance(cmd, MemberReplace):
                if cmd.old is not None and cmd.old in members:
                    members.remove(cmd.old)
                if cmd.new is not None and cmd.new not in members:
                    members.append(cmd.new)
        self.members = members

    # timers

    def _election_timeout(self) -> int:
        return int(self.rng.integers(ELECTION_TIMEOUT_MIN_MS, ELECTION_TIMEOUT_MAX_MS + 1))

    def _reset_election_timer(self) -> None:
        self.v.timer_token += 1
        token = self.v.timer_token
        self.node.after(self._election_timeout(), lambda: self._on_election_timer(token))

    def _on_election_timer(self, token: int) -> None:
        if token != self.v.timer_token or self.stopped or self.v.role is RaftRole.LEADER:
            return
        self.on_election_timeout()

    def _schedule_heartbeat(self) -> None:
        token = self.v.timer_token
        self.node.after(HEARTBEAT_INTERVAL_MS, lambda: self._on_heartbeat_timer(token))

    def _on_heartbeat_timer(self, token: int) -> None:
        if token != self.v.timer_token or not self.is_leader:
            return
        self._broadcast_append()
        self._schedule_heartbeat()

    # elections

    def on_election_timeout(self) -> None:
        if self.stopped or not self.node.online or self.node.node_id not in self.members:
            return
        self.current_term += 1
        self.voted_for = self.node.node_id
        self.v.role = RaftRole.CANDIDATE
        self.v.leader_id = None
        self.v.votes = {self.node.node_id}
        self._reset_election_timer()
        self.node.emit("raft.candidacy", {"group": self.group, "term": self.current_term})
        if len(self.v.votes) >= self._majority():
            self._become_leader()
            return
        request = RequestVote(
            group=self.group,
            term=self.current_term,
            candidate=self.node.node_id,
            last_log_index=self.last_index,
            last_log_term=self.last_term,
        )
        for peer in self._others():
            self.node.send(peer, request)

    def _step_down(self, term: int) -> None:
        was_leader = self.v.role is RaftRole.LEADER
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
        self.v.role = RaftRole.FOLLOWER
        self.v.votes = set()
        if was_leader:
            if self._ready is not None and not self._ready.triggered:
                self._ready.succeed(False)
            self._ready = None
            self._reset_election_timer()

    def handle_request_vote(self, req: RequestVote) -> VoteReply | None:
        if req.candidate not in self.members or self.stopped:
            return None
        if req.term > self.current_term:
            self._step_down(req.term)
        up_to_date = (req.last_log_term, req.last_log_index) >= (self.last_term, self.last_index)
        granted = (
            req.term == self.current_term
            and self.voted_for in (None, req.candidate)
            and up_to_date
        )
        if granted:
            self.voted_for = req.candidate
            self._reset_election_timer()
        return VoteReply(group=self.group, term=self.current_term, voter=self.node.node_id, granted=granted)

    def handle_vote_reply(self, reply: VoteReply) -> None:
        if reply.term > self.current_term:
            self._step_down(reply.term)
            self._reset_election_timer()
            return
        if self.v.role is not RaftRole.CANDIDATE or reply.term != self.current_term or not reply.granted:
            return
        self.v.votes.add(reply.voter)
        if len(self.v.votes & set(self.members)) >= self._majority():
            self._become_leader()

    def _become_leader(self) -> None:
        self.v.role = RaftRole.LEADER
        self.v.leader_id = self.node.node_id
        self.v.timer_token += 1
        now = self.node.now
        for peer in self._others():
            self.v.next_index[peer] = self.last_index + 1
            self.v.match_index[peer] = 0
            self.v.last_ack[peer] = now
        if self.monitor is not None:
            self.monitor.record_leader(now, self.group, self.current_term, self.node.node_id)
        self.node.emit("raft.leader_elected", {"group": self.group, "term": self.current_term})
        log.info(f"t={now} node {self.node.node_id} leads {self.group} in term {self.current_term}")
        self._ready = self.node.event()
        self.v.ready_index = self._append(NoOp())
        self._broadcast_append()
        self._schedule_heartbeat()
        self._advance_commit()
        for hook in list(self.on_leader):
            hook(self)

    def ready(self) -> simpy.Event:
        """Fires once this leader has applied its own election no-op."""
        if self._ready is None:
            ev = self.node.event()
            ev.succeed(False)
            return ev
        return self._ready

    # replication

    def _append(self, command: Any) -> int:
        entry = LogEntry(self.current_term, self.last_index + 1, command)
        self.log.append(entry)
        if isinstance(command, MemberReplace):
            self._recompute_members()
            if command.new is not None and command.new != self.node.node_id:
                # the newcomer already holds the log up to this entry
                self.v.next_index[command.new] = entry.index
                self.v.match_index.setdefault(command.new, 0)
                self.v.last_ack.setdefault(command.new, self.node.now)
        return entry.index

    def propose(self, command: Any) -> simpy.Event:
        """Event resolving to a ProposeOutcome for `command`."""
        done = self.node.event()
        if not self.is_leader:
            done.succeed(ProposeOutcome("redirect", leader_hint=self.v.leader_id))
            return done
        index = self._append(command)
        self._waiters[index] = _Waiter(self.current_term, done)
        self._broadcast_append()
        self._advance_commit()
        return done

    def propose_within(self, command: Any, timeout: int = PROPOSE_TIMEOUT_MS) -> Process:
        """Propose and wait at most `timeout`; returns a ProposeOutcome."""
        outcome = self.propose(command)
        yield outcome | self.node.sleep(timeout)
        if not outcome.triggered:
            return ProposeOutcome("timeout", leader_hint=self.v.leader_id)
        return outcome.value

    def _send_append(self, peer: int) -> None:
        next_index = self.v.next_index.get(peer, self.last_index + 1)
        prev_index = next_index - 1
        prev_term = self.log[prev_index - 1].term if prev_index > 0 else 0
        entries = tuple(self.log[prev_index : prev_index + APPEND_BATCH_LIMIT])
        self.node.send(
            peer,
            AppendEntries(
                group=self.group,
                term=self.current_term,
                leader=self.node.node_id,
                prev_log_index=prev_index,
                prev_log_term=prev_term,
                entries=entries,
                leader_commit=self.v.commit_index,
            ),
        )

    def _broadcast_append(self) -> None:
        for peer in self._others():
            self._send_append(peer)

    def handle_append_entries(self, req: AppendEntries) -> AppendReply | None:
        if self.stopped:
            return None
        if req.term < self.current_term:
            return AppendReply(group=self.group, term=self.current_term, follower=self.node.node_id, success=False)
        if req.term > self.current_term or self.v.role is not RaftRole.FOLLOWER:
            self._step_down(req.term)
        self.v.leader_id = req.leader
        self._reset_election_timer()

        if req.prev_log_index > self.last_index:
            return self._reject(self.last_index + 1)
        if req.prev_log_index > 0 and self.log[req.prev_log_index - 1].term != req.prev_log_term:
            bad_term = self.log[req.prev_log_index - 1].term
            first = req.prev_log_index
            while first > 1 and self.log[first - 2].term == bad_term:
                first -= 1
            return self._reject(first)

        changed = False
        for entry in req.entries:
            if entry.index <= self.last_index:
                if self.log[entry.index - 1].term == entry.term:
                    continue
                self._truncate(entry.index)
            self.log.append(entry)
            changed = True
        if changed:
            self._recompute_members()
        last_new = req.prev_log_index + len(req.entries)
        commit = min(req.leader_commit, last_new)
        if commit > self.v.commit_index:
            self.v.commit_index = commit
            self._apply_committed()
        return AppendReply(
            group=self.group,
            term=self.current_term,
            follower=self.node.node_id,
            success=True,
            match_index=last_new,
        )

    def _reject(self, conflict_index: int) -> AppendReply:
        return AppendReply(
            group=self.group,
            term=self.current_term,
            follower=self.node.node_id,
            success=False,
            conflict_index=conflict_index,
        )

    def _truncate(self, from_index: int) -> None:
        if from_index <= self.v.commit_index:
            raise RaftError(f"{self.group}: refusing to truncate committed index {from_index}")
        del self.log[from_index - 1 :]
        for index in [i for i in self._waiters if i >= from_index]:
            waiter = self._waiters.pop(index)
            if not waiter.event.triggered:
                waiter.event.succeed(ProposeOutcome("lost", leader_hint=self.v.leader_id))

    def handle_append_reply(self, reply: AppendReply) -> None:
        if reply.term > self.current_term:
            self._step_down(reply.term)
            return
        if not self.is_leader or reply.term != self.current_term or reply.follower not in self.members:
            return
        peer = reply.follower
        self.v.last_ack[peer] = self.node.now
        if reply.success:
            if reply.match_index > self.v.match_index.get(peer, 0):
                self.v.match_index[peer] = reply.match_index
            self.v.next_index[peer] = self.v.match_index[peer] + 1
            self._advance_commit()
            if self.v.next_index[peer] <= self.last_index:
                self._send_append(peer)
        else:
            current = self.v.next_index.get(peer, self.last_index + 1)
            self.v.next_index[peer] = max(1, min(current - 1, reply.conflict_index or current - 1))
            self._send_append(peer)

    def _advance_commit(self) -> None:
        for n in range(self.last_index, self.v.commit_index, -1):
            if self.log[n - 1].term != self.current_term:
                break
            acks = 1 + sum(1 for p in self._others() if self.v.match_index.get(p, 0) >= n)
            if acks >= self._majority():
                self.v.commit_index = n
                self._apply_committed()
                break

    def _apply_committed(self) -> None:
        while self.v.last_applied < self.v.commit_index:
            self.v.last_applied += 1
            entry = self.log[self.v.last_applied - 1]
            if self.monitor is not None:
                self.monitor.record_apply(self.node.now, self.group, entry, self.node.node_id)
            result = None
            if not isinstance(entry.command, (NoOp, MemberReplace)):
                result = self.state_machine.apply(entry.index, entry.command)
            for hook in list(self.on_apply):
                hook(self, entry, result)
            waiter = self._waiters.pop(entry.index, None)
            if waiter is not None and not waiter.event.triggered:
                if waiter.term == entry.term:
                    waiter.event.succeed(ProposeOutcome("committed", entry.index, result))
                else:
                    waiter.event.succeed(ProposeOutcome("lost", leader_hint=self.v.leader_id))
            if self._ready is not None and entry.index == self.v.ready_index and self.is_leader:
                if not self._ready.triggered:
                    self._ready.succeed(True)
        fired, self._applied_event = self._applied_event, self.node.event()
        fired.succeed(self.v.last_applied)

    def applied(self) -> simpy.Event:
        """Fires the next time any entry is applied."""
        return self._applied_event

    # client surface

    def handle_client_propose(self, msg: ClientPropose) -> Any:
        if not self.is_leader:
            return ClientReply(group=self.group, status="redirect", leader_hint=self.v.leader_id)
        return self._serve_proposal(msg.command)

    def _serve_proposal(self, command: Any) -> Process:
        outcome: ProposeOutcome = yield from self.propose_within(command)
        if outcome.status == "timeout":
            return ClientReply(group=self.group, status="timeout", leader_hint=self.v.leader_id)
        if outcome.committed:
            if self.on_client_commit is not None:
                self.on_client_commit(command, outcome.result)
            return ClientReply(group=self.group, status="committed", index=outcome.index, result=outcome.result)
        return ClientReply(group=self.group, status="redirect", leader_hint=outcome.leader_hint)

    def probe(self) -> RaftProbeReply:
        return RaftProbeReply(
            group=self.group,
            term=self.current_term,
            is_leader=self.is_leader,
            leader_hint=self.leader_id,
        )


class RaftService:
    """Routes Raft traffic for every group hosted on a node."""

    def __init__(self, node: Node, monitor: RaftMonitor | None = None):
        self.node = node
        self.monitor = monitor
        self.groups: dict[str, RaftMember] = {}
        node.on(RequestVote, self._on_request_vote)
        node.on(VoteReply, self._on_vote_reply)
        node.on(AppendEntries, self._on_append_entries)
        node.on(AppendReply, self._on_append_reply)
        node.on(ClientPropose, self._on_client_propose)
        node.on(RaftProbe, self._on_probe)
        node.on_crash(self._on_crash)
        node.on_restart(self._on_restart)

    def join(
        self,
        group: str,
        members: list[int],
        state_machine: Callable[[], StateMachine],
        *,
        campaign: bool = False,
        term: int = 0,
        log_entries: list[LogEntry] | None = None,
    ) -> RaftMember:
        existing = self.groups.get(group)
        if existing is not None and not existing.stopped:
            return existing
        member = RaftMember(self.node, group, members, state_machine, monitor=self.monitor)
        if log_entries is not None:
            member.install(term, log_entries)
        self.groups[group] = member
        member.start(campaign=campaign)
        return member

    def member(self, group: str) -> RaftMember | None:
        return self.groups.get(group)

    def _on_crash(self) -> None:
        for member in self.groups.values():
            member.crash()

    def _on_restart(self) -> None:
        for member in self.groups.values():
            member.restart()

    def _route(self, envelope: Envelope) -> RaftMember | None:
        group = getattr(envelope.payload, "group", None)
        member = self.groups.get(group) if group is not None else None
        if member is None or member.stopped:
            return None
        return member

    def _on_request_vote(self, envelope: Envelope) -> None:
        member = self._route(envelope)
        if member is not None:
            reply = member.handle_request_vote(envelope.payload)  # type: ignore[arg-type]
            if reply is not None:
                self.node.send(envelope.src, reply)

    def _on_vote_reply(self, envelope: Envelope) -> None:
        member = self._route(envelope)
        if member is not None:
            member.handle_vote_reply(envelope.payload)  # type: ignore[arg-type]

    def _on_append_entries(self, envelope: Envelope) -> None:
        member = self._route(envelope)
        if member is not None:
            reply = member.handle_append_entries(envelope.payload)  # type: ignore[arg-type]
            if reply is not None:
                self.node.send(envelope.src, reply)

    def _on_append_reply(self, envelope: Envelope) -> None:
        member = self._route(envelope)
        if member is not None:
            member.handle_append_reply(envelope.payload)  # type: ignore[arg-type]

    def _on_client_propose(self, envelope: Envelope) -> Any:
        member = self._route(envelope)
        if member is None:
            return ClientReply(group=envelope.payload.group, status="unknown_group")  # type: ignore[attr-defined]
        return member.handle_client_propose(envelope.payload)  # type: ignore[arg-type]

    def _on_probe(self, envelope: Envelope) -> RaftProbeReply | None:
        member = self._route(envelope)
        return None if member is None else member.probe()
