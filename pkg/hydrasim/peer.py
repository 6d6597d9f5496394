"""
Composition of the per-node services into peers and bootstrap servers.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

from hydrasim.allreduce import RankService
from hydrasim.bootstrap import BootstrapServer, BootstrapState, RegisterPeer, RegisterPeerReply
from hydrasim.coin import CoinRates, Ledger, LedgerService
from hydrasim.config import REFRESH_CYCLES
from hydrasim.dht import Contact, DhtService, PeerId
from hydrasim.metrics import MetricsSink
from hydrasim.models import DeviceProfile, ProfileReply, ProfileRequest
from hydrasim.multitracker import CreatorDuty, TrackerService
from hydrasim.raft import RaftMonitor, RaftService
from hydrasim.registry import DatasetClient, HolderService
from hydrasim.sim import Envelope, LatencyModel, Node, Process, SimulationError, Simulator
from hydrasim.trainer import TrainingCoordinator, WorkerService, rank_machine_factory

log = logging.getLogger(__name__)


class BootstrapNode:
    """A fault-free bootstrap server; the primary also owns the coin ledger."""

    def __init__(
        self,
        sim: Simulator,
        node_id: int,
        servers: list[int],
        *,
        t_b: float,
        rates: CoinRates | None = None,
    ):
        self.node = Node(sim, node_id, name=f"bootstrap-{node_id}")
        self.state = BootstrapState(sim.rng(f"bootstrap:{node_id}"), t_b)
        self.server = BootstrapServer(self.node, self.state, servers=servers)
        self.ledger: Ledger | None = None
        if self.server.is_primary:
            self.ledger = Ledger(rates or CoinRates())
            LedgerService(self.node, self.ledger)

    @property
    def address(self) -> int:
        return self.node.node_id


class Peer:
    """An ordinary peer running every protocol role."""

    def __init__(
        self,
        sim: Simulator,
        node_id: int,
        *,
        bootstrap: int,
        ledger: int,
        profile: DeviceProfile,
        monitor: RaftMonitor | None = None,
    ):
        self.node = Node(sim, node_id)
        self.bootstrap = bootstrap
        self.ledger = ledger
        self.profile = profile
        self.t_b: float | None = None
        self.joined = False
        self.dht = DhtService(self.node)
        self.raft = RaftService(self.node, monitor)
        self.holder = HolderService(self.node)
        self.client = DatasetClient(self.node, self.dht, self.holder, bootstrap=bootstrap, ledger=ledger)
        self.trackers = TrackerService(
            self.node, self.raft, self.dht, bootstrap=bootstrap, ledger=ledger, eligible=lambda: self.dht.ready
        )
        self.creator = CreatorDuty(self.node, self.client, self.dht, bootstrap=bootstrap)
        self.ranks = RankService(self.node, self.raft)
        self.ranks.machine_factory = rank_machine_factory
        self.worker = WorkerService(self.node, self.ranks, profile)
        self.node.on(ProfileRequest, self._on_profile)
        self.node.on_restart(self._on_restart)

    def __repr__(self) -> str:
        return f"<Peer {self.address} {self.node.status.value}>"

    @property
    def address(self) -> int:
        return self.node.node_id

    @property
    def peer_id(self) -> PeerId | None:
        return self.dht.peer_id

    def _on_profile(self, _envelope: Envelope) -> ProfileReply:
        return ProfileReply(profile=self.profile, peer_id=self.peer_id)

    def _on_restart(self) -> None:
        if self.joined:
            self.node.spawn(self.join())

    def join(self) -> Process:
        """Register with the bootstrap server, seed the table and refresh distant buckets."""
        reply = None
        for _ in range(REFRESH_CYCLES):
            reply = yield self.node.request(self.bootstrap, RegisterPeer(), 4 * self.node.sim.rpc_timeout)
            if isinstance(reply, RegisterPeerReply):
                break
        if not isinstance(reply, RegisterPeerReply):
            log.warning(f"peer {self.address} could not reach bootstrap {self.bootstrap}")
            return None
        self.dht.assign(reply.peer_id)
        self.dht.seed(Contact(PeerId(pid), address) for pid, address in reply.seeds)
        self.t_b = reply.t_b
        self.joined = True
        lookups = yield from self.dht.refresh(self.node.rng("refresh"))
        self.node.emit("peer.joined", {"seeds": len(reply.seeds), "refresh_lookups": lookups})
        return self.dht.peer_id

    def coordinator(self) -> TrainingCoordinator:
        if self.t_b is None:
            raise SimulationError(f"peer {self.address} has not joined")
        return TrainingCoordinator(self.node, self.ranks, self.ledger, self.t_b)


@dataclass
class Network:
    sim: Simulator
    monitor: RaftMonitor
    servers: list[BootstrapNode]
    peers: dict[int, Peer] = field(default_factory=dict)

    @property
    def primary(self) -> BootstrapNode:
        return self.servers[0]

    @property
    def ledger(self) -> Ledger:
        assert self.primary.ledger is not None
        return self.primary.ledger

    def peer(self, address: int) -> Peer:
        return self.peers[address]

    def bootstrap_for(self, address: int) -> int:
        return self.servers[address % len(self.servers)].address

    def join_all(self, addresses: Sequence[int] | None = None, interval: int = 0) -> Process:
        """Induct peers one after another."""
        node = self.primary.node
        for address in addresses if addresses is not None else sorted(self.peers):
            peer = self.peers[address]
            if peer.node.online and not peer.joined:
                proc = peer.node.spawn(peer.join())
                yield proc
            if interval:
                yield node.sleep(interval)
        return len([p for p in self.peers.values() if p.joined])


def build_network(
    latency: LatencyModel,
    profiles: Sequence[DeviceProfile],
    *,
    bootstrap_servers: int = 1,
    seed: int = 0,
    t_b: float = 100.0,
    rates: CoinRates | None = None,
    trace: bool = False,
    metrics: MetricsSink | None = None,
) -> Network:
    """Bootstrap servers take addresses 0..b-1; peers follow in `profiles` order."""
    if latency.size != bootstrap_servers + len(profiles):
        raise ValueError(
            f"latency model covers {latency.size} nodes, topology has {bootstrap_servers + len(profiles)}"
        )
    sim = Simulator(latency, seed=seed, trace=trace, metrics=metrics)
    monitor = RaftMonitor(sim.metrics)
    addresses = list(range(bootstrap_servers))
    servers = [BootstrapNode(sim, a, addresses, t_b=t_b, rates=rates) for a in addresses]
    network = Network(sim, monitor, servers)
    for offset, profile in enumerate(profiles):
        address = bootstrap_servers + offset
        network.peers[address] = Peer(
            sim,
            address,
            bootstrap=network.bootstrap_for(address),
            ledger=network.primary.address,
            profile=profile,
            monitor=monitor,
        )
    for server in servers:
        server.server.start()
    return network
