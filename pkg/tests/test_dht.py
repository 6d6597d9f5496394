import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hydrasim.config import ID_BITS
from hydrasim.dht import (
    Contact,
    DhtService,
    InsertResult,
    PeerId,
    RoutingTable,
    SelfDistanceError,
    SelfInsertionError,
    bucket_index,
    random_id_in_bucket,
    xor_distance,
)
from hydrasim.models import DeviceProfile
from hydrasim.peer import build_network
from hydrasim.sim import LatencyModel, Node, Simulator
from tests.conftest import scaled

ids = st.integers(min_value=0, max_value=(1 << ID_BITS) - 1)


@given(ids, ids, ids)
def test_xor_is_a_metric(a, b, c):
    assert xor_distance(a, b) == xor_distance(b, a)
    assert (xor_distance(a, b) == 0) == (a == b)
    assert xor_distance(a, c) <= xor_distance(a, b) + xor_distance(b, c)


def test_bucket_index_ends():
    assert bucket_index(1) == ID_BITS - 1
    assert bucket_index(1 << (ID_BITS - 1)) == 0
    with pytest.raises(SelfDistanceError):
        bucket_index(0)


@given(ids, st.integers(min_value=0, max_value=ID_BITS - 1), st.integers(min_value=0, max_value=2**32 - 1))
def test_random_id_lands_in_requested_bucket(owner, index, seed):
    target = random_id_in_bucket(owner, index, np.random.default_rng(seed))
    assert bucket_index(owner ^ target) == index


@given(ids, st.lists(ids, max_size=200), st.integers(min_value=1, max_value=4))
def test_bucket_law_holds_after_any_inserts(owner, others, capacity):
    table = RoutingTable(owner, capacity)
    for i, pid in enumerate(others):
        if pid == owner:
            continue
        table.insert(Contact(PeerId(pid), i), alive=lambda c: c.address % 3 != 0)
    assert table.audit() == []
    for c in table.contacts():
        assert table.buckets[bucket_index(owner ^ c.peer_id)].count(c) == 1


@pytest.mark.slow
def test_bucket_law_under_insert_evict_churn():
    rng = np.random.default_rng(11)
    owner = int.from_bytes(rng.bytes(32), "big")
    table = RoutingTable(owner, 4)
    known: list[int] = []
    for step in range(scaled(20_000)):
        if known and rng.random() < 0.3:
            table.remove(known.pop(int(rng.integers(len(known)))))
            continue
        # skew towards a handful of crowded buckets
        pid = random_id_in_bucket(owner, int(rng.integers(0, 6)), rng)
        result = table.insert(Contact(pid, step), alive=lambda c: c.address % 2 == 0)
        if result is not InsertResult.REJECTED and pid not in known:
            known.append(pid)
        known = [k for k in known if k in table]
    assert table.audit() == []


def test_full_bucket_keeps_live_occupants():
    owner = 0
    table = RoutingTable(owner, 2)
    first, second, third = (Contact(PeerId((1 << 255) | i), i) for i in (1, 2, 3))
    assert table.insert(first) is InsertResult.ACCEPTED
    assert table.insert(second) is InsertResult.ACCEPTED
    assert table.insert(third) is InsertResult.REJECTED
    assert table.insert(third, alive=lambda c: c != second) is InsertResult.REPLACED
    assert [c.address for c in table.bucket_of(third.peer_id)] == [1, 3]


def test_self_insertion_is_refused():
    table = RoutingTable(42)
    with pytest.raises(SelfInsertionError):
        table.insert(Contact(PeerId(42), 0))


def test_k_closest_orders_by_xor_distance():
    table = RoutingTable(0)
    for pid in (0b1000, 0b0110, 0b0101, 0b0011):
        table.insert(Contact(PeerId(pid), pid))
    assert [c.peer_id for c in table.k_closest(0b0100, 2)] == [0b0101, 0b0110]


class TestDhtService:
    @pytest.fixture
    def services(self) -> tuple[Simulator, list[DhtService]]:
        sim = Simulator(LatencyModel.constant(3, 5.0), seed=2)
        svcs = [DhtService(Node(sim, i), capacity=1) for i in range(3)]
        svcs[0].assign(0)
        svcs[1].assign((1 << 255) | 1)
        svcs[2].assign((1 << 255) | 2)
        svcs[0].seed([svcs[1].contact])
        return sim, svcs

    def test_dead_occupant_is_evicted(self, services):
        sim, svcs = services
        sim.crash(1)
        result = sim.execute(svcs[0].node, svcs[0].insert_peer(svcs[2].contact))
        assert result is InsertResult.REPLACED
        assert svcs[0].table.lookup(svcs[2].peer_id) == 2

    def test_live_occupant_wins(self, services):
        sim, svcs = services
        result = sim.execute(svcs[0].node, svcs[0].insert_peer(svcs[2].contact))
        assert result is InsertResult.REJECTED
        assert svcs[0].rejected_inserts == 1
        assert svcs[0].table.lookup(svcs[1].peer_id) == 1

    def test_crash_forgets_the_table_but_not_the_identity(self, services):
        sim, svcs = services
        sim.crash(0)
        assert svcs[0].table is None
        assert svcs[0].peer_id == 0


def _lookup_stats(peers: int, lookups: int, seed: int) -> tuple[int, list[int]]:
    profiles = [DeviceProfile(compute_ms=1.0, memory=10) for _ in range(peers)]
    network = build_network(LatencyModel.planar(peers + 1, min_ms=2, max_ms=20, seed=seed), profiles, seed=seed)
    network.sim.execute(network.primary.node, network.join_all())
    rng = np.random.default_rng(seed)
    addresses = sorted(network.peers)
    found, rounds = 0, []
    for _ in range(lookups):
        src, dst = (network.peer(int(a)) for a in rng.choice(addresses, size=2, replace=False))
        result = network.sim.execute(src.node, src.dht.find_node(dst.peer_id))
        found += result.address == dst.address
        rounds.append(result.rounds)
    return found, rounds


def test_lookups_find_every_peer_in_a_small_network():
    found, rounds = _lookup_stats(24, 40, seed=5)
    assert found == 40
    assert max(rounds) <= math.ceil(math.log2(24)) + 3


@pytest.mark.slow
def test_lookup_rounds_scale_logarithmically():
    peers = scaled(128, floor=32)
    lookups = scaled(50, floor=20)
    found, rounds = _lookup_stats(peers, lookups, seed=8)
    assert found == lookups
    assert np.mean(rounds) <= math.log2(peers)
    assert max(rounds) <= math.log2(peers) + 3


def test_induction_seeds_the_newcomer(small_network):
    network = small_network(8)
    for peer in network.peers.values():
        assert peer.joined
        assert len(peer.dht.table) > 0
        assert peer.dht.table.audit() == []
