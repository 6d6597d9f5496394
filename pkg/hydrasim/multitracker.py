"""
Replicated dataset trackers.

A dataset's tracker is a Raft group of up to REPLICA_COUNT peers closest to the
dataset hash. The group leader replaces members that stop acknowledging
heartbeats, tells the bootstrap servers whenever leadership or membership
changes, and pushes metadata snapshots to the dataset's creator. The creator
polls the group's liveness through the bootstrap servers and reboots the
tracker from its latest snapshot when every replica is gone.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass
from typing import Literal

from hydrasim.bootstrap import LivenessPoll, LivenessReply, UpdateLeader
from hydrasim.coin import CoinAward, RewardKind
from hydrasim.config import (
    DEAD_MEMBER_AFTER_MS,
    LIVENESS_POLL_MS,
    MAINTENANCE_INTERVAL_MS,
    REPLICA_COUNT,
    SNAPSHOT_EVERY_VERSIONS,
    SNAPSHOT_PERIOD_MS,
)
from hydrasim.dht import DhtService
from hydrasim.models import Ack, ErrorReply, Message
from hydrasim.raft import ClientReply, LogEntry, MemberReplace, RaftMember, RaftService
from hydrasim.registry import (
    CommandResult,
    Contribute,
    CreateTracker,
    DatasetClient,
    DatasetMeta,
    GetPeers,
    PeersReply,
    SnapshotPush,
    TrackerStateMachine,
    tracker_group,
)
from hydrasim.sim import Envelope, Node, Process, SimTime

log = logging.getLogger(__name__)


class StateTransfer(Message):
    kind: Literal["STATE_TRANSFER"] = "STATE_TRANSFER"
    hash: int
    title: str
    creator: int
    incarnation: int
    snapshot: DatasetMeta | None
    initial_members: tuple[int, ...]
    term: int
    log: tuple[LogEntry, ...]


@dataclass
class TrackerGroup:
    """Local view of one tracker group hosted on this node."""

    hash: int
    title: str
    creator: int
    incarnation: int
    snapshot: DatasetMeta | None
    member: RaftMember
    replica_target: int = REPLICA_COUNT
    degraded: bool = False
    changing: bool = False

    @property
    def group_id(self) -> str:
        return self.member.group

    @property
    def members(self) -> list[int]:
        return self.member.members

    @property
    def meta(self) -> DatasetMeta:
        return self.member.state_machine.meta  # type: ignore[attr-defined,no-any-return]


class TrackerService:
    def __init__(
        self,
        node: Node,
        raft: RaftService,
        dht: DhtService,
        *,
        bootstrap: int,
        ledger: int,
        replica_target: int = REPLICA_COUNT,
        eligible: Callable[[], bool] = lambda: True,
    ):
        self.node = node
        self.raft = raft
        self.dht = dht
        self.bootstrap = bootstrap
        self.ledger = ledger
        self.replica_target = replica_target
        self.eligible = eligible
        self.groups: dict[str, TrackerGroup] = {}
        node.on(CreateTracker, self._on_create)
        node.on(StateTransfer, self._on_state_transfer)
        node.on(GetPeers, self._on_get_peers)
        node.on_restart(self._on_restart)

    def group_for(self, hash_: int) -> TrackerGroup | None:
        found = [g for g in self.groups.values() if g.hash == hash_]
        return max(found, key=lambda g: g.incarnation) if found else None

    # group setup

    def _host(
        self,
        hash_: int,
        title: str,
        creator: int,
        incarnation: int,
        snapshot: DatasetMeta | None,
        members: list[int],
        *,
        campaign: bool,
        term: int = 0,
        log_entries: list[LogEntry] | None = None,
    ) -> TrackerGroup:
        group_id = tracker_group(hash_, incarnation)
        member = self.raft.join(
            group_id,
            members,
            lambda: TrackerStateMachine(title, incarnation, snapshot),
            campaign=campaign,
            term=term,
            log_entries=log_entries,
        )
        group = TrackerGroup(hash_, title, creator, incarnation, snapshot, member, self.replica_target)
        self.groups[group_id] = group
        member.on_leader.append(lambda m, g=group: self._on_leader(g))
        member.on_apply.append(lambda m, entry, result, g=group: self._on_apply(g, entry, result))
        member.on_client_commit = lambda command, result, g=group: self._on_client_commit(g, command, result)
        return group

    def _on_create(self, envelope: Envelope) -> Ack | ErrorReply:
        msg: CreateTracker = envelope.payload  # type: ignore[assignment]
        if not self.eligible():
            return ErrorReply(reason="ineligible")
        existing = self.groups.get(tracker_group(msg.hash, msg.incarnation))
        if existing is None:
            self._host(
                msg.hash, msg.title, msg.creator, msg.incarnation, msg.snapshot, [self.node.node_id], campaign=True
            )
            log.info(f"t={self.node.now} node {self.node.node_id} tracks {msg.title!r} (incarnation {msg.incarnation})")
        return Ack()

    def _on_state_transfer(self, envelope: Envelope) -> Ack | ErrorReply:
        msg: StateTransfer = envelope.payload  # type: ignore[assignment]
        if not self.eligible():
            return ErrorReply(reason="ineligible")
        group_id = tracker_group(msg.hash, msg.incarnation)
        if group_id not in self.groups:
            self._host(
                msg.hash,
                msg.title,
                msg.creator,
                msg.incarnation,
                msg.snapshot,
                list(msg.initial_members),
                campaign=False,
                term=msg.term,
                log_entries=list(msg.log),
            )
        return Ack()

    def _on_get_peers(self, envelope: Envelope) -> PeersReply | ClientReply:
        msg: GetPeers = envelope.payload  # type: ignore[assignment]
        group = self.groups.get(msg.group)
        if group is None:
            return ClientReply(group=msg.group, status="unknown_group")
        if not group.member.is_leader:
            return ClientReply(group=msg.group, status="redirect", leader_hint=group.member.leader_id)
        return PeersReply(meta=group.meta.model_copy(deep=True))

    def _on_restart(self) -> None:
        for group in self.groups.values():
            group.changing = False

    # leader duties

    def _on_leader(self, group: TrackerGroup) -> None:
        self.notify_leader_change(group)
        self._schedule_maintenance(group, 0)

    def notify_leader_change(self, group: TrackerGroup) -> None:
        member = group.member
        self.node.request(
            self.bootstrap,
            UpdateLeader(
                hash=group.hash,
                leader=self.node.node_id,
                members=tuple(member.members),
                incarnation=group.incarnation,
                term=member.current_term,
            ),
        )
        self.node.emit("tracker.leader_change", {"title": group.title, "term": member.current_term})

    def _schedule_maintenance(self, group: TrackerGroup, delay: SimTime = MAINTENANCE_INTERVAL_MS) -> None:
        term = group.member.current_term
        self.node.after(delay, lambda: self._maintenance_tick(group, term))

    def _maintenance_tick(self, group: TrackerGroup, term: int) -> None:
        member = group.member
        if not member.is_leader or member.current_term != term:
            return
        if not group.changing:
            now = self.node.now
            dead = [
                m
                for m in member.members
                if m != self.node.node_id and now - (member.last_ack(m) or now) > DEAD_MEMBER_AFTER_MS
            ]
            if dead or len(member.members) < group.replica_target:
                group.changing = True
                self.node.spawn(self.maintain_replicas(group, dead[0] if dead else None))
        self._schedule_maintenance(group)

    def maintain_replicas(self, group: TrackerGroup, dead: int | None) -> Process:
        """Replace `dead` (or grow the group) with the closest live eligible peer to the dataset hash."""
        member = group.member
        try:
            if dead is None and len(member.members) >= group.replica_target:
                return None
            ready = yield member.ready()
            if not ready:
                return None
            candidates = yield from self.dht.closest_peers(group.hash, 2 * group.replica_target + 2)
            for contact in candidates:
                if contact.address in member.members or not member.is_leader:
                    continue
                transfer = StateTransfer(
                    hash=group.hash,
                    title=group.title,
                    creator=group.creator,
                    incarnation=group.incarnation,
                    snapshot=group.snapshot,
                    initial_members=tuple(member.initial_members),
                    term=member.current_term,
                    log=tuple(member.log),
                )
                reply = yield self.node.request(contact.address, transfer)
                if not isinstance(reply, Ack):
                    continue
                outcome = yield from member.propose_within(MemberReplace(old=dead, new=contact.address))
                if outcome.committed:
                    group.degraded = False
                    self.node.emit(
                        "tracker.member_replaced",
                        {"title": group.title, "old": dead, "new": contact.address},
                    )
                    self.notify_leader_change(group)
                return None
            if dead is not None and member.is_leader:
                yield from member.propose_within(MemberReplace(old=dead, new=None))
                self.notify_leader_change(group)
            if not group.degraded:
                group.degraded = True
                log.warning(f"tracker {group.title!r} degraded: {len(member.members)} of {group.replica_target} replicas")
            self.node.emit("tracker.degraded", {"title": group.title, "members": len(member.members)})
            return None
        finally:
            group.changing = False

    def _on_apply(self, group: TrackerGroup, entry: LogEntry, result: object) -> None:
        if not isinstance(result, CommandResult) or not result.changed or not group.member.is_leader:
            return
        if result.version % SNAPSHOT_EVERY_VERSIONS == 0:
            self.node.send(group.creator, SnapshotPush(meta=group.meta.model_copy(deep=True)))

    def _on_client_commit(self, group: TrackerGroup, command: object, result: object) -> None:
        if isinstance(command, Contribute) and isinstance(result, CommandResult) and result.changed:
            self.node.send(
                self.ledger,
                CoinAward(
                    channel=RewardKind.CONTRIBUTION,
                    peer=command.peer,
                    basis=result.bytes_added,
                    key=command.request_id,
                    dataset=group.hash,
                ),
            )


@dataclass
class CreatorSnapshot:
    hash: int
    title: str
    meta: DatasetMeta
    taken_at: SimTime


class CreatorDuty:
    """Snapshots and liveness polling for datasets this peer created. Snapshots are durable."""

    def __init__(
        self,
        node: Node,
        client: DatasetClient,
        dht: DhtService,
        *,
        bootstrap: int,
        replica_target: int = REPLICA_COUNT,
        snapshot_period: SimTime = SNAPSHOT_PERIOD_MS,
        poll_interval: SimTime = LIVENESS_POLL_MS,
    ):
        self.node = node
        self.client = client
        self.dht = dht
        self.bootstrap = bootstrap
        self.replica_target = replica_target
        self.snapshot_period = snapshot_period
        self.poll_interval = poll_interval
        self.snapshots: dict[int, CreatorSnapshot] = {}
        self.titles: dict[int, str] = {}
        self.rebooting: set[int] = set()
        client.on_created.append(self.adopt)
        node.on(SnapshotPush, self._on_snapshot_push)
        node.on_restart(self._on_restart)

    def adopt(self, hash_: int, title: str, _leader: int) -> None:
        self.titles[hash_] = title
        self.snapshots[hash_] = CreatorSnapshot(hash_, title, DatasetMeta.new(title), self.node.now)
        self.node.after(self.poll_interval, lambda: self._poll_tick(hash_))
        self.node.after(self.snapshot_period, lambda: self._snapshot_tick(hash_))

    def _on_restart(self) -> None:
        self.rebooting.clear()
        for hash_ in self.titles:
            self.node.after(self.poll_interval, lambda h=hash_: self._poll_tick(h))
            self.node.after(self.snapshot_period, lambda h=hash_: self._snapshot_tick(h))

    def _keep(self, meta: DatasetMeta) -> None:
        current = self.snapshots.get(meta.hash)
        if current is None or (meta.incarnation, meta.version) >= (current.meta.incarnation, current.meta.version):
            self.snapshots[meta.hash] = CreatorSnapshot(meta.hash, meta.title, meta, self.node.now)

    def _on_snapshot_push(self, envelope: Envelope) -> None:
        msg: SnapshotPush = envelope.payload  # type: ignore[assignment]
        if msg.meta.hash in self.titles:
            self._keep(msg.meta)

    def _snapshot_tick(self, hash_: int) -> None:
        self.node.spawn(self.take_snapshot(hash_))
        self.node.after(self.snapshot_period, lambda: self._snapshot_tick(hash_))

    def take_snapshot(self, hash_: int) -> Process:
        meta = yield from self.client.fetch_meta(hash_)
        if isinstance(meta, DatasetMeta):
            self._keep(meta)
            self.node.emit("tracker.snapshot", {"title": meta.title, "version": meta.version})
        return meta

    def _poll_tick(self, hash_: int) -> None:
        if hash_ not in self.rebooting:
            self.node.spawn(self.poll(hash_))
        self.node.after(self.poll_interval, lambda: self._poll_tick(hash_))

    def poll(self, hash_: int) -> Process:
        reply = yield self.node.request(self.bootstrap, LivenessPoll(hash=hash_))
        if isinstance(reply, LivenessReply) and not reply.live:
            yield from self.reboot_tracker(hash_, reply.incarnation)
        return reply

    def reboot_tracker(self, hash_: int, incarnation: int) -> Process:
        """Elect a new tracker from the latest snapshot after every replica was lost."""
        snapshot = self.snapshots.get(hash_)
        if snapshot is None:
            self.node.emit("dataset_unrecoverable", {"hash": f"{hash_:x}"})
            log.error(f"node {self.node.node_id}: no snapshot of {hash_:#x}, dataset unrecoverable")
            return None
        self.rebooting.add(hash_)
        try:
            closest = yield from self.dht.closest_peers(hash_, 2 * self.replica_target + 2)
            pool = {c.address: c.peer_id for c in closest}
            pool[self.node.node_id] = self.dht.contact.peer_id
            for address, _ in sorted(pool.items(), key=lambda item: (item[1] ^ hash_, item[1])):
                ack = yield self.node.request(
                    address,
                    CreateTracker(
                        hash=hash_,
                        title=snapshot.title,
                        creator=self.node.node_id,
                        incarnation=incarnation + 1,
                        snapshot=snapshot.meta,
                    ),
                )
                if isinstance(ack, Ack):
                    self.client.leaders.pop(hash_, None)
                    self.node.emit(
                        "tracker.rebooted",
                        {"title": snapshot.title, "version": snapshot.meta.version, "tracker": address},
                    )
                    log.warning(f"tracker for {snapshot.title!r} rebooted on {address} at v{snapshot.meta.version}")
                    return address
            return None
        finally:
            self.rebooting.discard(hash_)
