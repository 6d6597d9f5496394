"""
Kademlia-style routing and iterative peer discovery.

Peers are identified by 256-bit ids; the distance between two ids is their
XOR. A routing table keeps one bucket per leading-bit position, each holding
at most BUCKET_CAPACITY contacts in insertion order. Full buckets prefer old
live occupants over newcomers.

The table itself is a plain data structure (RoutingTable). DhtService runs the
wire protocol on a simulated node: answering FIND_PEER, probing occupants of
full buckets and performing iterative lookups.

See: docs/adr/ADR-001-deterministic-simulation-and-fault-model.md
"""

import heapq
import logging
from collections.abc import Callable, Iterable
from enum import Enum
from typing import Any, Literal, NamedTuple, NewType

import numpy as np

from hydrasim.config import (
    BUCKET_CAPACITY,
    ID_BITS,
    LIVENESS_WINDOW_MS,
    LOOKUP_FANOUT,
    REFRESH_BUCKETS,
)
from hydrasim.models import Heartbeat, HeartbeatAck, HydraError, Message
from hydrasim.sim import Envelope, Node, Process, SimTime

log = logging.getLogger(__name__)

PeerId = NewType("PeerId", int)

ID_MASK: int = (1 << ID_BITS) - 1


class DhtError(HydraError):
    pass


class SelfDistanceError(DhtError):
    def __init__(self) -> None:
        super().__init__("self-distance has no bucket")


class SelfInsertionError(DhtError):
    def __init__(self, peer_id: int):
        super().__init__(f"peer {peer_id:#x} cannot be inserted into its own table")


class Contact(NamedTuple):
    peer_id: PeerId
    address: int


class InsertResult(str, Enum):
    ACCEPTED = "accepted"
    REPLACED = "replaced"
    REJECTED = "rejected"


def random_peer_id(rng: np.random.Generator) -> PeerId:
    return PeerId(int.from_bytes(rng.bytes(ID_BITS // 8), "big"))


def xor_distance(a: int, b: int) -> int:
    return a ^ b


def bucket_index(distance: int) -> int:
    """Position of the most significant set bit, counting the MSB as 0."""
    if distance == 0:
        raise SelfDistanceError()
    if distance < 0 or distance > ID_MASK:
        raise DhtError(f"distance out of range: {distance}")
    return ID_BITS - distance.bit_length()


def random_id_in_bucket(owner: int, index: int, rng: np.random.Generator) -> PeerId:
    """A random id whose distance to `owner` falls in bucket `index`."""
    low_bits = ID_BITS - 1 - index
    noise = int.from_bytes(rng.bytes(ID_BITS // 8), "big") & ((1 << low_bits) - 1)
    return PeerId(owner ^ (1 << low_bits) ^ noise)


class RoutingTable:
    """Per-peer bucket table. Volatile: owners rebuild it after a restart."""

    def __init__(self, owner: int, capacity: int = BUCKET_CAPACITY):
        if capacity < 1:
            raise DhtError("bucket capacity must be positive")
        self.owner = PeerId(owner)
        self.capacity = capacity
        self.buckets: list[list[Contact]] = [[] for _ in range(ID_BITS)]
        self._index: dict[int, Contact] = {}

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, peer_id: object) -> bool:
        return peer_id in self._index

    def bucket_of(self, peer_id: int) -> list[Contact]:
        if peer_id == self.owner:
            raise SelfInsertionError(peer_id)
        return self.buckets[bucket_index(self.owner ^ peer_id)]

    def is_full(self, peer_id: int) -> bool:
        return len(self.bucket_of(peer_id)) >= self.capacity

    def insert(self, contact: Contact, alive: Callable[[Contact], bool] | None = None) -> InsertResult:
        """
        Insert `contact`. A full bucket evicts the first occupant `alive` rejects;
        without a predicate every occupant counts as alive.
        """
        bucket = self.bucket_of(contact.peer_id)
        known = self._index.get(contact.peer_id)
        if known is not None:
            if known.address != contact.address:
                bucket[bucket.index(known)] = contact
                self._index[contact.peer_id] = contact
            return InsertResult.ACCEPTED
        if len(bucket) < self.capacity:
            bucket.append(contact)
            self._index[contact.peer_id] = contact
            return InsertResult.ACCEPTED
        if alive is not None:
            for pos, occupant in enumerate(bucket):
                if not alive(occupant):
                    del self._index[occupant.peer_id]
                    del bucket[pos]
                    bucket.append(contact)
                    self._index[contact.peer_id] = contact
                    return InsertResult.REPLACED
        return InsertResult.REJECTED

    def lookup(self, peer_id: int) -> int | None:
        contact = self._index.get(peer_id)
        return None if contact is None else contact.address

    def remove(self, peer_id: int) -> bool:
        contact = self._index.pop(peer_id, None)
        if contact is None:
            return False
        self.bucket_of(peer_id).remove(contact)
        return True

    def contacts(self) -> list[Contact]:
        return [c for bucket in self.buckets for c in bucket]

    def k_closest(self, target: int, k: int, exclude: Iterable[int] = ()) -> list[Contact]:
        if k < 1:
            raise DhtError("k must be at least 1")
        skip = set(exclude)
        pool = (c for c in self._index.values() if c.peer_id not in skip)
        return heapq.nsmallest(k, pool, key=lambda c: (c.peer_id ^ target, c.peer_id))

    def nonempty_buckets(self) -> list[int]:
        return [i for i, bucket in enumerate(self.buckets) if bucket]

    def clear(self) -> None:
        for bucket in self.buckets:
            bucket.clear()
        self._index.clear()

    def audit(self) -> list[str]:
        """Placement, capacity and uniqueness violations; empty when the table is sound."""
        problems: list[str] = []
        seen: set[int] = set()
        for i, bucket in enumerate(self.buckets):
            if len(bucket) > self.capacity:
                problems.append(f"bucket {i} holds {len(bucket)} > {self.capacity}")
            for c in bucket:
                if c.peer_id in seen:
                    problems.append(f"duplicate peer {c.peer_id:#x}")
                seen.add(c.peer_id)
                if c.peer_id == self.owner or bucket_index(self.owner ^ c.peer_id) != i:
                    problems.append(f"peer {c.peer_id:#x} misplaced in bucket {i}")
        if seen != set(self._index):
            problems.append("index out of sync with buckets")
        return problems


class FindPeer(Message):
    kind: Literal["FIND_PEER"] = "FIND_PEER"
    target: int
    requester: tuple[int, int] | None = None


class FindPeerReply(Message):
    kind: Literal["FIND_PEER_REPLY"] = "FIND_PEER_REPLY"
    found: int | None = None
    closest: tuple[tuple[int, int], ...] = ()


class LookupResult(NamedTuple):
    address: int | None
    rounds: int
    contacted: list[Contact]
    reason: str | None = None

    @property
    def found(self) -> bool:
        return self.address is not None


def iterative_find(
    node: Node,
    target: int,
    candidates: Iterable[Contact],
    *,
    self_id: int | None = None,
    requester: Contact | None = None,
    fanout: int = LOOKUP_FANOUT,
    width: int = LOOKUP_FANOUT,
    timeout: SimTime | None = None,
    exhaustive: bool = False,
) -> Process:
    """
    Iterative FIND_PEER from `node`, starting from `candidates`.

    The plain variant stops once a round brings nobody strictly closer than the
    best contact so far. The exhaustive variant keeps going until the `width`
    closest live contacts have all answered, which is what replica placement
    needs. Returns a LookupResult whose `contacted` lists every responder.
    """
    shortlist: dict[int, Contact] = {}
    for c in candidates:
        if c.peer_id != self_id:
            shortlist[c.peer_id] = c
    queried: set[int] = set()
    failed: set[int] = set()
    responders: list[Contact] = []
    wire_requester = None if requester is None else (requester.peer_id, requester.address)

    def live_sorted() -> list[Contact]:
        return sorted(
            (c for pid, c in shortlist.items() if pid not in failed),
            key=lambda c: (c.peer_id ^ target, c.peer_id),
        )

    best = live_sorted()[0].peer_id ^ target if shortlist else None
    rounds = 0
    while True:
        batch = [c for c in live_sorted() if c.peer_id not in queried][:fanout]
        if not batch:
            break
        rounds += 1
        events = [
            node.request(c.address, FindPeer(target=target, requester=wire_requester), timeout)
            for c in batch
        ]
        replies: list[Any] = yield from node.collect(events)
        any_reply = False
        for contact, reply in zip(batch, replies):
            queried.add(contact.peer_id)
            if not isinstance(reply, FindPeerReply):
                failed.add(contact.peer_id)
                continue
            any_reply = True
            responders.append(contact)
            if reply.found is not None and not exhaustive:
                return LookupResult(reply.found, rounds, sorted(responders))
            for pid, address in reply.closest:
                if pid != self_id and pid not in shortlist:
                    shortlist[pid] = Contact(PeerId(pid), address)
        live = live_sorted()
        if exhaustive:
            if all(c.peer_id in queried for c in live[:width]):
                break
            continue
        if not any_reply:
            continue
        new_best = live[0].peer_id ^ target if live else None
        if best is not None and (new_best is None or new_best >= best):
            break
        best = new_best
    reason = "no live route" if not responders else None
    return LookupResult(None, rounds, sorted(responders), reason)


class DhtService:
    """Routing table plus the FIND_PEER / HEARTBEAT protocol for one node."""

    def __init__(
        self,
        node: Node,
        *,
        capacity: int = BUCKET_CAPACITY,
        fanout: int = LOOKUP_FANOUT,
    ):
        self.node = node
        self.capacity = capacity
        self.fanout = fanout
        self.peer_id: PeerId | None = None
        self.table: RoutingTable | None = None
        self.last_seen: dict[int, SimTime] = {}
        self.rejected_inserts = 0
        node.on(FindPeer, self._on_find_peer)
        node.on(Heartbeat, self._on_heartbeat)
        node.on_crash(self._on_crash)

    @property
    def contact(self) -> Contact:
        if self.peer_id is None:
            raise DhtError(f"node {self.node.node_id} has no peer id yet")
        return Contact(self.peer_id, self.node.node_id)

    @property
    def ready(self) -> bool:
        return self.table is not None

    def assign(self, peer_id: int) -> None:
        self.peer_id = PeerId(peer_id)
        self.table = RoutingTable(peer_id, self.capacity)

    def _on_crash(self) -> None:
        # identity survives, the table does not
        self.table = None
        self.last_seen.clear()

    def _seen(self, address: int) -> None:
        self.last_seen[address] = self.node.now

    def _on_heartbeat(self, envelope: Envelope) -> HeartbeatAck:
        self._seen(envelope.src)
        return HeartbeatAck()

    def _on_find_peer(self, envelope: Envelope) -> FindPeerReply | None:
        if self.table is None or self.peer_id is None:
            return None
        msg: FindPeer = envelope.payload  # type: ignore[assignment]
        self._seen(envelope.src)
        exclude: set[int] = {self.peer_id}
        if msg.requester is not None:
            requester = Contact(PeerId(msg.requester[0]), msg.requester[1])
            exclude.add(requester.peer_id)
            if requester.peer_id != self.peer_id:
                self.node.after(0, lambda: self.learn(requester))
        if msg.target == self.peer_id:
            return FindPeerReply(found=self.node.node_id)
        found = self.table.lookup(msg.target)
        if found is not None:
            return FindPeerReply(found=found)
        closest = self.table.k_closest(msg.target, self.fanout, exclude=exclude)
        return FindPeerReply(closest=tuple((c.peer_id, c.address) for c in closest))

    def learn(self, contact: Contact) -> None:
        """Schedule an asynchronous insert of `contact`."""
        if self.table is None or contact.peer_id == self.peer_id or contact.peer_id in self.table:
            return
        self.node.spawn(self.insert_peer(contact))

    def insert_peer(self, contact: Contact) -> Process:
        """Insert, probing the occupants of a full bucket with one heartbeat each."""
        if self.table is None:
            return InsertResult.REJECTED
        if contact.peer_id == self.peer_id:
            raise SelfInsertionError(contact.peer_id)
        dead: set[int] = set()
        if self.table.is_full(contact.peer_id) and contact.peer_id not in self.table:
            now = self.node.now
            stale = [
                c
                for c in self.table.bucket_of(contact.peer_id)
                if now - self.last_seen.get(c.address, -LIVENESS_WINDOW_MS - 1) > LIVENESS_WINDOW_MS
            ]
            events = [self.node.request(c.address, Heartbeat()) for c in stale]
            replies = yield from self.node.collect(events)
            for c, reply in zip(stale, replies):
                if isinstance(reply, HeartbeatAck):
                    self._seen(c.address)
                else:
                    dead.add(c.peer_id)
            if self.table is None:
                return InsertResult.REJECTED
        result = self.table.insert(contact, alive=lambda c: c.peer_id not in dead)
        if result is InsertResult.REJECTED:
            self.rejected_inserts += 1
            log.debug(f"node {self.node.node_id} rejected {contact.peer_id:#x}: bucket full of live peers")
        return result

    def seed(self, contacts: Iterable[Contact]) -> None:
        if self.table is None:
            return
        for c in contacts:
            if c.peer_id != self.peer_id:
                self.table.insert(c)

    def find_node(self, target: int, *, exhaustive: bool = False, width: int | None = None) -> Process:
        """Local lookup first, then an iterative network lookup."""
        if self.table is None or self.peer_id is None:
            return LookupResult(None, 0, [], "not inducted")
        if target == self.peer_id:
            return LookupResult(self.node.node_id, 0, [])
        local = self.table.lookup(target)
        if local is not None and not exhaustive:
            return LookupResult(local, 0, [])
        width = width or self.fanout
        result: LookupResult = yield from iterative_find(
            self.node,
            target,
            self.table.k_closest(target, max(width, self.fanout)),
            self_id=self.peer_id,
            requester=self.contact,
            fanout=self.fanout,
            width=width,
            exhaustive=exhaustive,
        )
        for c in result.contacted:
            self.learn(c)
        return result

    def closest_peers(self, target: int, count: int) -> Process:
        """The `count` closest live contacts to `target` known after an exhaustive lookup."""
        if self.table is None or self.peer_id is None:
            return []
        result: LookupResult = yield from self.find_node(target, exhaustive=True, width=count)
        ranked = sorted(result.contacted, key=lambda c: (c.peer_id ^ target, c.peer_id))
        return ranked[:count]

    def refresh(self, rng: np.random.Generator) -> Process:
        """Look up one random id in each bucket farther than the closest neighbour."""
        if self.table is None or self.peer_id is None:
            return 0
        occupied = self.table.nonempty_buckets()
        if not occupied:
            return 0
        nearest = max(occupied)
        lookups = 0
        for index in range(nearest - 1, max(-1, nearest - 1 - REFRESH_BUCKETS), -1):
            if self.table is None:
                break
            yield from self.find_node(random_id_in_bucket(self.peer_id, index, rng))
            lookups += 1
        return lookups
