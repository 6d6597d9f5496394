"""
Bootstrap servers.

Always-available nodes that issue peer ids, induct newcomers into the DHT,
keep the global dataset list and the current tracker leader of every dataset.
Mutations are applied by the primary server and copied synchronously to the
other servers before the caller is acknowledged; reads are served locally.
"""

import logging
from collections.abc import Iterable
from dataclasses import dataclass, field
from typing import Any, Literal

import numpy as np

from hydrasim.config import LIVENESS_POLL_MS, LIVENESS_WINDOW_MS
from hydrasim.dht import Contact, PeerId, RoutingTable, iterative_find, random_peer_id
from hydrasim.models import Ack, ErrorReply, Heartbeat, HeartbeatAck, HydraError, Message
from hydrasim.sim import Envelope, Node, Process

log = logging.getLogger(__name__)


class BootstrapError(HydraError):
    pass


class DatasetExistsError(BootstrapError):
    def __init__(self, title: str):
        super().__init__(f"dataset exists: {title!r}")


class UnknownDatasetError(BootstrapError):
    def __init__(self, dataset_hash: int):
        super().__init__(f"unknown dataset {dataset_hash:#x}")


@dataclass
class LeaderRecord:
    title: str
    leader: int
    creator: int
    members: tuple[int, ...] = ()
    incarnation: int = 0
    term: int = 0
    lost: bool = False


@dataclass
class BootstrapState:
    """Replicated bootstrap data. `rng` is only used on the primary."""

    rng: np.random.Generator
    t_b: float
    issued: set[int] = field(default_factory=set)
    registrations: dict[int, PeerId] = field(default_factory=dict)
    dataset_index: dict[str, int] = field(default_factory=dict)
    leader_index: dict[int, LeaderRecord] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.t_b <= 0:
            raise BootstrapError("reference step time must be positive")

    def issue_peer_id(self, address: int) -> PeerId:
        existing = self.registrations.get(address)
        if existing is not None:
            return existing
        while True:
            candidate = random_peer_id(self.rng)
            if candidate not in self.issued:
                break
        self.record_peer(address, candidate)
        return candidate

    def record_peer(self, address: int, peer_id: int) -> None:
        self.issued.add(peer_id)
        self.registrations[address] = PeerId(peer_id)

    def register_dataset(self, title: str, dataset_hash: int, leader: int, creator: int) -> None:
        if not title:
            raise BootstrapError("dataset title must not be empty")
        if title in self.dataset_index:
            raise DatasetExistsError(title)
        self.dataset_index[title] = dataset_hash
        self.leader_index[dataset_hash] = LeaderRecord(title, leader, creator, (leader,))

    def update_leader(
        self, dataset_hash: int, leader: int, members: Iterable[int], incarnation: int, term: int
    ) -> bool:
        """Last writer wins, except that an older (incarnation, term) never overrides a newer one."""
        record = self.leader_index.get(dataset_hash)
        if record is None:
            raise UnknownDatasetError(dataset_hash)
        if (incarnation, term) < (record.incarnation, record.term):
            return False
        record.leader = leader
        record.members = tuple(members)
        record.incarnation = incarnation
        record.term = term
        record.lost = False
        return True

    def get_leader(self, dataset_hash: int) -> LeaderRecord:
        record = self.leader_index.get(dataset_hash)
        if record is None:
            raise UnknownDatasetError(dataset_hash)
        return record

    def list_datasets(self) -> list[tuple[str, int, int]]:
        return [
            (title, h, self.leader_index[h].leader) for title, h in sorted(self.dataset_index.items())
        ]


class RegisterPeer(Message):
    kind: Literal["REGISTER_PEER"] = "REGISTER_PEER"


class RegisterPeerReply(Message):
    kind: Literal["REGISTER_PEER_REPLY"] = "REGISTER_PEER_REPLY"
    peer_id: int
    seeds: tuple[tuple[int, int], ...] = ()
    t_b: float


class IssuePeerId(Message):
    kind: Literal["ISSUE_PEER_ID"] = "ISSUE_PEER_ID"
    address: int


class RegisterDataset(Message):
    kind: Literal["REGISTER_DATASET"] = "REGISTER_DATASET"
    title: str
    hash: int
    leader: int
    creator: int


class UpdateLeader(Message):
    kind: Literal["UPDATE_LEADER"] = "UPDATE_LEADER"
    hash: int
    leader: int
    members: tuple[int, ...]
    incarnation: int
    term: int


class GetLeader(Message):
    kind: Literal["GET_LEADER"] = "GET_LEADER"
    hash: int


class LeaderInfo(Message):
    kind: Literal["LEADER_INFO"] = "LEADER_INFO"
    hash: int
    title: str
    leader: int
    members: tuple[int, ...]
    incarnation: int
    term: int
    creator: int


class ListDatasets(Message):
    kind: Literal["LIST_DATASETS"] = "LIST_DATASETS"


class DatasetList(Message):
    kind: Literal["DATASET_LIST"] = "DATASET_LIST"
    entries: tuple[tuple[str, int, int], ...]


class LivenessPoll(Message):
    kind: Literal["LIVENESS_POLL"] = "LIVENESS_POLL"
    hash: int


class LivenessReply(Message):
    kind: Literal["LIVENESS_REPLY"] = "LIVENESS_REPLY"
    hash: int
    live: tuple[int, ...]
    incarnation: int


class Replicate(Message):
    kind: Literal["REPLICATE"] = "REPLICATE"
    mutation: Any
    peer_id: int | None = None


def _error(e: BootstrapError) -> ErrorReply:
    if isinstance(e, DatasetExistsError):
        return ErrorReply(reason="dataset exists")
    if isinstance(e, UnknownDatasetError):
        return ErrorReply(reason="unknown dataset")
    return ErrorReply(reason=str(e))


class BootstrapServer:
    def __init__(
        self,
        node: Node,
        state: BootstrapState,
        *,
        servers: list[int],
        audit_interval: int = LIVENESS_POLL_MS,
    ):
        self.node = node
        self.state = state
        self.servers = servers
        self.primary = servers[0]
        self.audit_interval = audit_interval
        self.seed_table = RoutingTable(random_peer_id(node.rng("bootstrap-id")))
        self.last_seen: dict[int, int] = {}
        node.on(RegisterPeer, self._on_register_peer)
        node.on(IssuePeerId, self._on_issue_peer_id)
        node.on(RegisterDataset, self._on_mutation)
        node.on(UpdateLeader, self._on_mutation)
        node.on(Replicate, self._on_replicate)
        node.on(GetLeader, self._on_get_leader)
        node.on(ListDatasets, self._on_list)
        node.on(LivenessPoll, self._on_liveness_poll)
        node.on(Heartbeat, lambda _env: HeartbeatAck())

    @property
    def is_primary(self) -> bool:
        return self.node.node_id == self.primary

    def start(self) -> None:
        if self.is_primary:
            self._schedule_audit()

    # replication

    def _apply(self, mutation: Message, peer_id: int | None = None) -> Any:
        match mutation:
            case IssuePeerId(address=address):
                if peer_id is None:
                    return self.state.issue_peer_id(address)
                self.state.record_peer(address, peer_id)
                self._remember(Contact(PeerId(peer_id), address))
                return peer_id
            case RegisterDataset():
                self.state.register_dataset(mutation.title, mutation.hash, mutation.leader, mutation.creator)
            case UpdateLeader():
                return self.state.update_leader(
                    mutation.hash, mutation.leader, mutation.members, mutation.incarnation, mutation.term
                )
        return None

    def _replicate(self, mutation: Message, peer_id: int | None = None) -> Process:
        others = [s for s in self.servers if s != self.node.node_id]
        events = [self.node.request(s, Replicate(mutation=mutation, peer_id=peer_id)) for s in others]
        yield from self.node.collect(events)

    def _on_replicate(self, envelope: Envelope) -> Ack:
        msg: Replicate = envelope.payload  # type: ignore[assignment]
        try:
            self._apply(msg.mutation, msg.peer_id)
        except BootstrapError as e:
            log.warning(f"bootstrap {self.node.node_id} replica diverged: {e}")
        return Ack()

    def _on_mutation(self, envelope: Envelope) -> Process:
        mutation = envelope.payload
        self.last_seen[envelope.src] = self.node.now
        if not self.is_primary:
            reply = yield self.node.request(self.primary, mutation)
            return reply
        try:
            self._apply(mutation)
        except BootstrapError as e:
            log.info(f"bootstrap rejected {mutation.kind}: {e}")
            return _error(e)
        yield from self._replicate(mutation)
        if isinstance(mutation, RegisterDataset):
            self.node.emit("bootstrap.dataset_registered", {"title": mutation.title})
        return Ack()

    # induction

    def _on_issue_peer_id(self, envelope: Envelope) -> Process:
        msg: IssuePeerId = envelope.payload  # type: ignore[assignment]
        peer_id = self.state.issue_peer_id(msg.address)
        yield from self._replicate(msg, peer_id)
        return Ack(detail={"peer_id": peer_id})

    def _remember(self, contact: Contact) -> None:
        now = self.node.now
        self.last_seen[contact.address] = now
        self.seed_table.insert(
            contact,
            alive=lambda c: now - self.last_seen.get(c.address, -LIVENESS_WINDOW_MS - 1) <= LIVENESS_WINDOW_MS,
        )

    def _on_register_peer(self, envelope: Envelope) -> Process:
        address = envelope.src
        if self.is_primary:
            peer_id = self.state.issue_peer_id(address)
            yield from self._replicate(IssuePeerId(address=address), peer_id)
        else:
            reply = yield self.node.request(self.primary, IssuePeerId(address=address))
            if not isinstance(reply, Ack) or reply.detail is None:
                return None
            peer_id = reply.detail["peer_id"]
            self.state.record_peer(address, peer_id)
        newcomer = Contact(PeerId(peer_id), address)
        result = yield from iterative_find(
            self.node,
            peer_id,
            self.seed_table.k_closest(peer_id, 3, exclude=(peer_id,)),
            self_id=peer_id,
            requester=newcomer,
        )
        for c in result.contacted:
            self.last_seen[c.address] = self.node.now
        self._remember(newcomer)
        self.node.emit("bootstrap.inducted", {"peer": address, "seeds": len(result.contacted)})
        return RegisterPeerReply(
            peer_id=peer_id,
            seeds=tuple((c.peer_id, c.address) for c in result.contacted),
            t_b=self.state.t_b,
        )

    # reads

    def _leader_info(self, dataset_hash: int) -> LeaderInfo:
        record = self.state.get_leader(dataset_hash)
        return LeaderInfo(
            hash=dataset_hash,
            title=record.title,
            leader=record.leader,
            members=record.members,
            incarnation=record.incarnation,
            term=record.term,
            creator=record.creator,
        )

    def _on_get_leader(self, envelope: Envelope) -> LeaderInfo | ErrorReply:
        try:
            return self._leader_info(envelope.payload.hash)  # type: ignore[attr-defined]
        except BootstrapError as e:
            return _error(e)

    def _on_list(self, _envelope: Envelope) -> DatasetList:
        return DatasetList(entries=tuple(self.state.list_datasets()))

    def probe(self, addresses: Iterable[int]) -> Process:
        """Addresses that answer a heartbeat."""
        targets = sorted(set(addresses))
        replies = yield from self.node.collect([self.node.request(a, Heartbeat()) for a in targets])
        return tuple(a for a, r in zip(targets, replies) if isinstance(r, HeartbeatAck))

    def _on_liveness_poll(self, envelope: Envelope) -> Any:
        try:
            record = self.state.get_leader(envelope.payload.hash)  # type: ignore[attr-defined]
        except BootstrapError as e:
            return _error(e)
        return self._answer_poll(envelope.payload.hash, record)  # type: ignore[attr-defined]

    def _answer_poll(self, dataset_hash: int, record: LeaderRecord) -> Process:
        live = yield from self.probe((record.leader, *record.members))
        return LivenessReply(hash=dataset_hash, live=live, incarnation=record.incarnation)

    # audit

    def _schedule_audit(self) -> None:
        self.node.after(self.audit_interval, lambda: self.node.spawn(self._audit()))

    def _audit(self) -> Process:
        for dataset_hash, record in sorted(self.state.leader_index.items()):
            if record.lost:
                continue
            live = yield from self.probe((record.leader, *record.members))
            if live:
                continue
            creator_alive = yield from self.probe((record.creator,))
            if not creator_alive:
                record.lost = True
                self.node.emit("dataset_lost", {"title": record.title, "incarnation": record.incarnation})
                log.warning(f"dataset {record.title!r} lost: no tracker and no creator online")
        self._schedule_audit()
