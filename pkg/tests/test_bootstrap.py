import numpy as np
import pytest

from hydrasim.bootstrap import (
    BootstrapError,
    BootstrapState,
    DatasetExistsError,
    GetLeader,
    LeaderInfo,
    RegisterDataset,
    UnknownDatasetError,
    UpdateLeader,
)
from hydrasim.config import LIVENESS_POLL_MS
from hydrasim.models import Ack, DeviceProfile, ErrorReply
from hydrasim.peer import Network, build_network
from hydrasim.sim import LatencyModel, Process


@pytest.fixture
def state() -> BootstrapState:
    return BootstrapState(np.random.default_rng(0), t_b=2.0)


class TestBootstrapState:
    def test_peer_ids_are_unique_and_stable(self, state):
        ids = [state.issue_peer_id(a) for a in range(50)]
        assert len(set(ids)) == 50
        assert state.issue_peer_id(7) == ids[7]

    def test_titles_are_unique(self, state):
        state.register_dataset("mnist", 1, leader=3, creator=3)
        with pytest.raises(DatasetExistsError):
            state.register_dataset("mnist", 2, leader=4, creator=4)
        with pytest.raises(BootstrapError):
            state.register_dataset("", 5, leader=4, creator=4)

    def test_older_leader_updates_are_ignored(self, state):
        state.register_dataset("mnist", 1, leader=3, creator=3)
        assert state.update_leader(1, 4, (4, 5, 6), incarnation=0, term=3)
        assert not state.update_leader(1, 5, (4, 5, 6), incarnation=0, term=2)
        assert state.get_leader(1).leader == 4
        assert state.update_leader(1, 9, (9,), incarnation=1, term=1)
        assert state.get_leader(1).leader == 9

    def test_unknown_dataset(self, state):
        with pytest.raises(UnknownDatasetError):
            state.get_leader(99)

    def test_reference_time_must_be_positive(self):
        with pytest.raises(BootstrapError):
            BootstrapState(np.random.default_rng(0), t_b=0.0)


@pytest.fixture
def replicated() -> Network:
    profiles = [DeviceProfile(compute_ms=1.0, memory=100) for _ in range(6)]
    network = build_network(LatencyModel.constant(8, 10.0), profiles, bootstrap_servers=2, seed=4, t_b=3.0)
    network.sim.execute(network.primary.node, network.join_all())
    return network


def test_replicas_agree_on_registrations(replicated):
    primary, secondary = (s.state for s in replicated.servers)
    assert primary.registrations == secondary.registrations
    assert set(primary.registrations) == set(replicated.peers)
    assert all(p.t_b == 3.0 for p in replicated.peers.values())


def test_mutations_through_a_secondary_reach_every_replica(replicated):
    peer = replicated.peer(3)
    secondary = replicated.servers[1].address

    def register() -> Process:
        first = yield peer.node.request(secondary, RegisterDataset(title="cifar", hash=11, leader=3, creator=3))
        again = yield peer.node.request(secondary, RegisterDataset(title="cifar", hash=12, leader=4, creator=4))
        update = yield peer.node.request(
            secondary, UpdateLeader(hash=11, leader=4, members=(4, 5, 6), incarnation=0, term=2)
        )
        info = yield peer.node.request(secondary, GetLeader(hash=11))
        return first, again, update, info

    first, again, update, info = replicated.sim.execute(peer.node, register())
    assert isinstance(first, Ack)
    assert again == ErrorReply(reason="dataset exists")
    assert isinstance(update, Ack)
    assert isinstance(info, LeaderInfo) and info.leader == 4 and info.members == (4, 5, 6)
    for server in replicated.servers:
        assert server.state.dataset_index == {"cifar": 11}


def test_restarted_peer_keeps_its_id(replicated):
    peer = replicated.peer(4)
    before = peer.peer_id
    replicated.sim.crash(4)
    replicated.sim.run_for(100)
    replicated.sim.restart(4)
    replicated.sim.run_for(2_000)
    assert peer.peer_id == before
    assert peer.dht.table is not None and len(peer.dht.table) > 0


def test_audit_declares_a_dataset_lost(replicated):
    state = replicated.primary.state
    state.register_dataset("orphan", 21, leader=5, creator=6)
    state.leader_index[21].members = (5, 7)
    for address in (5, 6, 7):
        replicated.sim.crash(address)
    replicated.sim.run_for(2 * LIVENESS_POLL_MS + 500)
    assert state.leader_index[21].lost
    lost = replicated.sim.metrics.select("dataset_lost")
    assert [r.value["title"] for r in lost] == ["orphan"]


def test_live_creator_keeps_a_dataset_alive(replicated):
    state = replicated.primary.state
    state.register_dataset("kept", 22, leader=5, creator=6)
    replicated.sim.crash(5)
    replicated.sim.run_for(2 * LIVENESS_POLL_MS + 500)
    assert not state.leader_index[22].lost
