"""
Dataset registry.

DatasetMeta is the tracker's key-value record for one dataset. It only changes
by applying commands from the tracker group's Raft log (TrackerStateMachine);
every command that changes the record bumps its version by one.

DatasetClient is the peer-side API: create, contribute, download, plus the
scripted validation and annotation hooks that feed the coin ledger. Peers are
identified by their network address throughout the registry.
"""

import hashlib
import logging
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field

from hydrasim.bootstrap import GetLeader, LeaderInfo, RegisterDataset, UpdateLeader
from hydrasim.coin import CoinAward, CoinPenalty, RewardKind
from hydrasim.config import (
    CHUNK_SIZE_BYTES,
    CLIENT_ATTEMPTS,
    ELECTION_TIMEOUT_MAX_MS,
    PROPOSE_TIMEOUT_MS,
    REPLICA_COUNT,
)
from hydrasim.dht import DhtService
from hydrasim.models import Ack, ErrorReply, HydraError, Message
from hydrasim.raft import ClientPropose, ClientReply
from hydrasim.sim import Envelope, Node, Process

log = logging.getLogger(__name__)


class RegistryError(HydraError):
    pass


def dataset_hash(title: str) -> int:
    return int.from_bytes(hashlib.sha256(title.encode("utf-8")).digest(), "big")


def tracker_group(hash_: int, incarnation: int) -> str:
    return f"tracker:{hash_:064x}:{incarnation}"


class FileEntry(BaseModel):
    filename: str
    size: int = Field(ge=0)
    holders: list[int] = Field(default_factory=list)
    unavailable: bool = False


class DatasetMeta(BaseModel):
    title: str
    hash: int
    files: list[FileEntry] = Field(default_factory=list)
    contributors: list[int] = Field(default_factory=list)
    downloaders: list[int] = Field(default_factory=list)
    version: int = 1
    incarnation: int = 0

    @classmethod
    def new(cls, title: str, incarnation: int = 0) -> "DatasetMeta":
        return cls(title=title, hash=dataset_hash(title), incarnation=incarnation)

    def file(self, filename: str) -> FileEntry | None:
        for entry in self.files:
            if entry.filename == filename:
                return entry
        return None

    def peers(self) -> set[int]:
        """Everyone the tracker knows as a source: contributors and downloaders."""
        return set(self.contributors) | set(self.downloaders)

    def holder_pairs(self) -> set[tuple[str, int]]:
        return {(f.filename, h) for f in self.files for h in f.holders}

    def total_bytes(self) -> int:
        return sum(f.size for f in self.files)


class Contribute(BaseModel):
    model_config = ConfigDict(frozen=True)

    op: Literal["CONTRIBUTE"] = "CONTRIBUTE"
    peer: int
    files: tuple[tuple[str, int], ...]
    request_id: str


class AddDownloader(BaseModel):
    model_config = ConfigDict(frozen=True)

    op: Literal["ADD_DOWNLOADER"] = "ADD_DOWNLOADER"
    peer: int
    request_id: str


class AddHolder(BaseModel):
    model_config = ConfigDict(frozen=True)

    op: Literal["ADD_HOLDER"] = "ADD_HOLDER"
    peer: int
    filename: str
    request_id: str


class ReportUnavailable(BaseModel):
    model_config = ConfigDict(frozen=True)

    op: Literal["REPORT_UNAVAILABLE"] = "REPORT_UNAVAILABLE"
    filename: str
    request_id: str


class MergeMeta(BaseModel):
    model_config = ConfigDict(frozen=True)

    op: Literal["MERGE_META"] = "MERGE_META"
    meta: DatasetMeta
    request_id: str


TrackerCommand = Contribute | AddDownloader | AddHolder | ReportUnavailable | MergeMeta


class CommandResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    version: int
    changed: bool
    bytes_added: int = 0


def merge_meta(current: DatasetMeta, other: DatasetMeta) -> DatasetMeta:
    """Union of files, holders and peers; the version moves past both inputs."""
    merged = current.model_copy(deep=True)
    for theirs in other.files:
        mine = merged.file(theirs.filename)
        if mine is None:
            merged.files.append(theirs.model_copy(deep=True))
            continue
        for holder in theirs.holders:
            if holder not in mine.holders:
                mine.holders.append(holder)
        if mine.holders:
            mine.unavailable = False
    for peer in other.contributors:
        if peer not in merged.contributors:
            merged.contributors.append(peer)
    for peer in other.downloaders:
        if peer not in merged.downloaders:
            merged.downloaders.append(peer)
    merged.version = max(current.version, other.version) + 1
    return merged


class TrackerStateMachine:
    """Applies tracker commands to a DatasetMeta. Re-delivered request ids are no-ops."""

    def __init__(self, title: str, incarnation: int = 0, base: DatasetMeta | None = None):
        if base is not None:
            self.meta = base.model_copy(deep=True)
            self.meta.incarnation = incarnation
        else:
            self.meta = DatasetMeta.new(title, incarnation)
        self.results: dict[str, CommandResult] = {}

    def apply(self, index: int, command: Any) -> CommandResult:
        request_id = getattr(command, "request_id", None)
        if request_id is not None and request_id in self.results:
            return self.results[request_id]
        bytes_added = 0
        match command:
            case Contribute():
                changed, bytes_added = self._contribute(command)
            case AddDownloader():
                changed = command.peer not in self.meta.downloaders
                if changed:
                    self.meta.downloaders.append(command.peer)
            case AddHolder():
                changed = self._add_holder(command.peer, command.filename)
            case ReportUnavailable():
                entry = self.meta.file(command.filename)
                changed = entry is not None and not entry.unavailable
                if changed:
                    entry.unavailable = True  # type: ignore[union-attr]
            case MergeMeta():
                # merge_meta already moves the version past both sides
                self.meta = merge_meta(self.meta, command.meta)
                changed = True
            case _:
                raise RegistryError(f"unknown tracker command {command!r}")
        if changed and not isinstance(command, MergeMeta):
            self.meta.version += 1
        result = CommandResult(version=self.meta.version, changed=changed, bytes_added=bytes_added)
        if request_id is not None:
            self.results[request_id] = result
        return result

    def _contribute(self, command: Contribute) -> tuple[bool, int]:
        changed = False
        added = 0
        for filename, size in command.files:
            entry = self.meta.file(filename)
            if entry is None:
                self.meta.files.append(FileEntry(filename=filename, size=size, holders=[command.peer]))
            elif command.peer not in entry.holders:
                entry.holders.append(command.peer)
                entry.unavailable = False
            else:
                continue
            changed = True
            added += size
        if changed and command.peer not in self.meta.contributors:
            self.meta.contributors.append(command.peer)
        return changed, added

    def _add_holder(self, peer: int, filename: str) -> bool:
        entry = self.meta.file(filename)
        if entry is None or peer in entry.holders:
            return False
        entry.holders.append(peer)
        entry.unavailable = False
        return True


class CreateTracker(Message):
    kind: Literal["CREATE_TRACKER"] = "CREATE_TRACKER"
    hash: int
    title: str
    creator: int
    incarnation: int = 0
    snapshot: DatasetMeta | None = None


class GetPeers(Message):
    kind: Literal["GET_PEERS"] = "GET_PEERS"
    hash: int
    group: str


class PeersReply(Message):
    kind: Literal["PEERS_REPLY"] = "PEERS_REPLY"
    meta: DatasetMeta


class SnapshotPush(Message):
    kind: Literal["SNAPSHOT_PUSH"] = "SNAPSHOT_PUSH"
    meta: DatasetMeta


class GetChunk(Message):
    kind: Literal["GET_CHUNK"] = "GET_CHUNK"
    hash: int
    filename: str
    offset: int
    length: int


class Chunk(Message):
    kind: Literal["CHUNK"] = "CHUNK"
    filename: str
    offset: int
    length: int
    digest: str


def chunk_digest(hash_: int, filename: str, offset: int, length: int) -> str:
    """Synthetic content fingerprint standing in for the chunk payload."""
    return hashlib.sha256(f"{hash_:x}:{filename}:{offset}:{length}".encode()).hexdigest()


@dataclass
class DatasetOutcome:
    ok: bool
    hash: int | None = None
    leader: int | None = None
    version: int | None = None
    error: str | None = None


@dataclass
class DownloadReport:
    hash: int
    received: dict[str, int] = field(default_factory=dict)
    unavailable: list[str] = field(default_factory=list)
    served: dict[int, int] = field(default_factory=dict)
    error: str | None = None

    @property
    def complete(self) -> bool:
        return self.error is None and not self.unavailable

    @property
    def bytes_received(self) -> int:
        return sum(self.received.values())


class HolderService:
    """Serves chunks of locally held files. Storage survives crashes."""

    def __init__(self, node: Node):
        self.node = node
        self.storage: dict[int, dict[str, int]] = {}
        self.bytes_served = 0
        node.on(GetChunk, self._on_get_chunk)

    def store(self, hash_: int, filename: str, size: int) -> None:
        self.storage.setdefault(hash_, {})[filename] = size

    def holds(self, hash_: int, filename: str) -> bool:
        return filename in self.storage.get(hash_, {})

    def _on_get_chunk(self, envelope: Envelope) -> Chunk | ErrorReply:
        msg: GetChunk = envelope.payload  # type: ignore[assignment]
        size = self.storage.get(msg.hash, {}).get(msg.filename)
        if size is None:
            return ErrorReply(reason="not held")
        if msg.offset < 0 or msg.length < 0 or msg.offset + msg.length > size:
            return ErrorReply(reason="chunk out of range")
        self.bytes_served += msg.length
        return Chunk(
            filename=msg.filename,
            offset=msg.offset,
            length=msg.length,
            digest=chunk_digest(msg.hash, msg.filename, msg.offset, msg.length),
        )


class DatasetClient:
    """Peer-side dataset operations. All public methods are simulation processes."""

    def __init__(
        self,
        node: Node,
        dht: DhtService,
        holder: HolderService,
        *,
        bootstrap: int,
        ledger: int,
        candidate_count: int = 2 * REPLICA_COUNT + 2,
    ):
        self.node = node
        self.dht = dht
        self.holder = holder
        self.bootstrap = bootstrap
        self.ledger = ledger
        self.candidate_count = candidate_count
        self.leaders: dict[int, LeaderInfo] = {}
        self.views: dict[int, DatasetMeta] = {}
        self.on_created: list[Callable[[int, str, int], None]] = []
        self._requests = 0
        node.on_crash(self._on_crash)

    def _on_crash(self) -> None:
        self.leaders.clear()

    def _request_id(self, what: str) -> str:
        self._requests += 1
        return f"{self.node.node_id}:{self.node.incarnation}:{what}:{self._requests}"

    @property
    def _timeout(self) -> int:
        return PROPOSE_TIMEOUT_MS + 2 * self.node.sim.rpc_timeout

    # leader resolution

    def resolve(self, hash_: int, *, refresh: bool = False) -> Process:
        """Current tracker leader info from the cache or the bootstrap server."""
        if not refresh and hash_ in self.leaders:
            return self.leaders[hash_]
        reply = yield self.node.request(self.bootstrap, GetLeader(hash=hash_))
        if isinstance(reply, LeaderInfo):
            self.leaders[hash_] = reply
            return reply
        if isinstance(reply, ErrorReply):
            return reply
        return None

    def tracker_call(self, hash_: int, command: Any) -> Process:
        """Propose `command` to the dataset's tracker, following redirects and re-resolving on timeouts."""
        hint: int | None = None
        refresh = False
        for attempt in range(CLIENT_ATTEMPTS):
            info = yield from self.resolve(hash_, refresh=refresh)
            if isinstance(info, ErrorReply):
                return info
            if info is None:
                yield self.node.sleep(ELECTION_TIMEOUT_MAX_MS)
                refresh = True
                continue
            target = hint if hint is not None else info.leader
            group = tracker_group(hash_, info.incarnation)
            reply = yield self.node.request(target, ClientPropose(group=group, command=command), self._timeout)
            if isinstance(reply, ClientReply) and reply.status == "committed":
                return reply
            if isinstance(reply, ClientReply) and reply.status == "redirect" and reply.leader_hint not in (None, target):
                hint = reply.leader_hint
                continue
            log.info(f"node {self.node.node_id}: tracker call attempt {attempt + 1} on {target} failed")
            hint = None
            refresh = True
            yield self.node.sleep(ELECTION_TIMEOUT_MAX_MS)
        return ErrorReply(reason="tracker unreachable")

    def fetch_meta(self, hash_: int) -> Process:
        """Leader's current DatasetMeta, with the same retry contract as tracker_call."""
        hint: int | None = None
        refresh = False
        for _ in range(CLIENT_ATTEMPTS):
            info = yield from self.resolve(hash_, refresh=refresh)
            if isinstance(info, ErrorReply):
                return info
            if info is None:
                yield self.node.sleep(ELECTION_TIMEOUT_MAX_MS)
                refresh = True
                continue
            target = hint if hint is not None else info.leader
            reply = yield self.node.request(target, GetPeers(hash=hash_, group=tracker_group(hash_, info.incarnation)))
            if isinstance(reply, PeersReply):
                return reply.meta
            if isinstance(reply, ClientReply) and reply.status == "redirect" and reply.leader_hint not in (None, target):
                hint = reply.leader_hint
                continue
            hint = None
            refresh = True
            yield self.node.sleep(ELECTION_TIMEOUT_MAX_MS)
        return ErrorReply(reason="tracker unreachable")

    # operations

    def create_dataset(self, title: str) -> Process:
        hash_ = dataset_hash(title)
        closest = yield from self.dht.closest_peers(hash_, self.candidate_count)
        pool = {c.address: c.peer_id for c in closest}
        pool[self.node.node_id] = self.dht.contact.peer_id
        candidates = sorted(pool.items(), key=lambda item: (item[1] ^ hash_, item[1]))
        leader = candidates[0][0]
        reply = yield self.node.request(
            self.bootstrap, RegisterDataset(title=title, hash=hash_, leader=leader, creator=self.node.node_id)
        )
        if isinstance(reply, ErrorReply):
            log.info(f"create {title!r} rejected: {reply.reason}")
            return DatasetOutcome(ok=False, hash=hash_, error=reply.reason)
        if reply is None:
            return DatasetOutcome(ok=False, hash=hash_, error="bootstrap unreachable")
        for address, _peer_id in candidates:
            ack = yield self.node.request(
                address, CreateTracker(hash=hash_, title=title, creator=self.node.node_id)
            )
            if isinstance(ack, Ack):
                if address != leader:
                    yield self.node.request(
                        self.bootstrap,
                        UpdateLeader(hash=hash_, leader=address, members=(address,), incarnation=0, term=0),
                    )
                self.node.emit("registry.dataset_created", {"title": title, "tracker": address})
                for hook in self.on_created:
                    hook(hash_, title, address)
                return DatasetOutcome(ok=True, hash=hash_, leader=address, version=1)
        return DatasetOutcome(ok=False, hash=hash_, error="no tracker accepted")

    def contribute(self, hash_: int, files: list[tuple[str, int]]) -> Process:
        for filename, size in files:
            self.holder.store(hash_, filename, size)
        command = Contribute(peer=self.node.node_id, files=tuple(files), request_id=self._request_id("contribute"))
        reply = yield from self.tracker_call(hash_, command)
        if isinstance(reply, ErrorReply):
            return DatasetOutcome(ok=False, hash=hash_, error=reply.reason)
        result: CommandResult = reply.result
        return DatasetOutcome(ok=True, hash=hash_, version=result.version)

    def download(self, hash_: int) -> Process:
        report = DownloadReport(hash=hash_)
        meta = yield from self.fetch_meta(hash_)
        if isinstance(meta, ErrorReply):
            report.error = meta.reason
            return report
        yield from self._merge_cached_view(hash_, meta)
        yield from self.tracker_call(
            hash_, AddDownloader(peer=self.node.node_id, request_id=self._request_id("downloader"))
        )
        for entry in meta.files:
            if self.holder.holds(hash_, entry.filename):
                report.received[entry.filename] = entry.size
                continue
            done, served = yield from self._fetch_file(hash_, entry)
            for holder, n in served.items():
                report.served[holder] = report.served.get(holder, 0) + n
                self.node.send(
                    self.ledger,
                    CoinAward(
                        channel=RewardKind.SEEDING,
                        peer=holder,
                        basis=n,
                        key=self._request_id(f"seed:{holder}"),
                    ),
                )
            if done:
                report.received[entry.filename] = entry.size
                self.holder.store(hash_, entry.filename, entry.size)
                yield from self.tracker_call(
                    hash_,
                    AddHolder(peer=self.node.node_id, filename=entry.filename, request_id=self._request_id("holder")),
                )
            else:
                report.unavailable.append(entry.filename)
                yield from self.tracker_call(
                    hash_, ReportUnavailable(filename=entry.filename, request_id=self._request_id("unavailable"))
                )
        if report.unavailable:
            log.warning(f"node {self.node.node_id}: dataset {hash_:#x} reduced in size, missing {report.unavailable}")
            self.node.emit("registry.partial_download", {"missing": len(report.unavailable)})
        fresh = yield from self.fetch_meta(hash_)
        self.views[hash_] = fresh if isinstance(fresh, DatasetMeta) else meta
        return report

    def _fetch_file(self, hash_: int, entry: FileEntry) -> Process:
        holders = [h for h in entry.holders if h != self.node.node_id]
        served: dict[int, int] = {}
        offset = 0
        turn = 0
        while offset < entry.size:
            if not holders:
                return False, served
            source = holders[turn % len(holders)]
            length = min(CHUNK_SIZE_BYTES, entry.size - offset)
            reply = yield self.node.request(source, GetChunk(hash=hash_, filename=entry.filename, offset=offset, length=length))
            expected = chunk_digest(hash_, entry.filename, offset, length)
            if isinstance(reply, Chunk) and reply.digest == expected:
                served[source] = served.get(source, 0) + length
                offset += length
                turn += 1
            else:
                holders.remove(source)
        return True, served

    def _merge_cached_view(self, hash_: int, current: DatasetMeta) -> Process:
        cached = self.views.get(hash_)
        if cached is None or cached.incarnation >= current.incarnation:
            return None
        if cached.holder_pairs() <= current.holder_pairs() and cached.peers() <= current.peers():
            return None
        reply = yield from self.tracker_call(
            hash_, MergeMeta(meta=cached, request_id=self._request_id("merge"))
        )
        if isinstance(reply, ClientReply):
            self.node.emit("registry.meta_merged", {"version": reply.result.version})
        return reply

    # scripted data-quality hooks

    def validate(self, contributor: int, valid: int, invalid: int, dataset: int | None = None) -> None:
        if valid + invalid > 0:
            self.node.send(
                self.ledger,
                CoinAward(channel=RewardKind.VALIDATION, peer=self.node.node_id, basis=valid + invalid, dataset=dataset),
            )
        if invalid > 0:
            self.node.send(self.ledger, CoinPenalty(peer=contributor, items=invalid))

    def annotate(self, items: int, dataset: int | None = None) -> None:
        self.node.send(
            self.ledger,
            CoinAward(channel=RewardKind.ANNOTATION, peer=self.node.node_id, basis=items, dataset=dataset),
        )
