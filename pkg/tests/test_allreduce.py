import numpy as np
import pytest
from hypothesis import given, strategies as st

from hydrasim.allreduce import (
    GATHER,
    SCATTER,
    AllReduceError,
    BeginSession,
    CollectiveCoordinator,
    CommitStep,
    HostRank,
    RankService,
    RankStateMachine,
    SessionResult,
    StageInput,
    exchange_plan,
    halving_doubling,
    padded_length,
    padded_size,
    pairing,
    schedule,
)
from hydrasim.raft import RaftService
from hydrasim.sim import LatencyModel, Node, Process, Simulator

sizes = st.sampled_from([1, 2, 4, 8, 16])


@given(sizes, st.integers(min_value=0, max_value=15))
def test_pairing_is_an_involution(size, rank):
    rank %= size
    for phase, step in schedule(size):
        partner = pairing(rank, step, phase, size)
        assert partner != rank
        assert pairing(partner, step, phase, size) == rank


def test_pairing_distances():
    assert [pairing(0, s, SCATTER, 8) for s in range(3)] == [4, 2, 1]
    assert [pairing(0, s, GATHER, 8) for s in range(3)] == [1, 2, 4]
    with pytest.raises(AllReduceError):
        pairing(0, 0, SCATTER, 6)


def test_padding():
    assert [padded_size(n) for n in (1, 2, 3, 5, 8)] == [1, 2, 4, 8, 8]
    assert padded_length(10, 4) == 12
    with pytest.raises(AllReduceError):
        padded_size(0)


@given(sizes, st.integers(min_value=1, max_value=6), st.integers(min_value=0, max_value=2**32 - 1))
def test_halving_doubling_matches_the_sum(size, per_rank, seed):
    rng = np.random.default_rng(seed)
    vectors = [rng.normal(size=size * per_rank) for _ in range(size)]
    expected = np.sum(vectors, axis=0)
    for result in halving_doubling(vectors):
        np.testing.assert_allclose(result, expected, rtol=1e-12, atol=1e-12)


def test_scatter_steps_halve_the_window():
    plan = exchange_plan(0, 0, 4, 8)
    assert (plan.partner, plan.send, plan.recv) == (2, (4, 8), (0, 4))
    plan = exchange_plan(3, 1, 4, 8)
    assert (plan.partner, plan.send, plan.recv) == (2, (4, 6), (6, 8))


def test_in_memory_reduction_rejects_bad_shapes():
    with pytest.raises(AllReduceError):
        halving_doubling([np.zeros(4), np.zeros(4), np.zeros(4)])
    with pytest.raises(AllReduceError):
        halving_doubling([np.zeros(3), np.zeros(3)])


class TestRankStateMachine:
    def _begin(self, machine: RankStateMachine) -> BeginSession:
        machine.apply(1, StageInput(key="k", vector=np.arange(3.0), n=3))
        begin = BeginSession(
            session="s", position=0, size=2, length=4, input_key="k", ranks=("a", "b"), addresses=(1, 2), coordinator=0
        )
        machine.apply(2, begin)
        return begin

    def test_input_is_padded_to_the_session_length(self):
        machine = RankStateMachine()
        self._begin(machine)
        state = machine.sessions["s"]
        assert state.vector.tolist() == [0.0, 1.0, 2.0, 0.0]
        assert state.steps == 2

    def test_retried_step_returns_the_recorded_segment(self):
        machine = RankStateMachine()
        self._begin(machine)
        sent = machine.apply(3, CommitStep(session="s", ordinal=0, received=np.array([10.0, 20.0])))
        again = machine.apply(4, CommitStep(session="s", ordinal=0, received=np.array([99.0, 99.0])))
        np.testing.assert_array_equal(sent, again)
        assert machine.sessions["s"].vector.tolist() == [10.0, 21.0, 2.0, 0.0]

    def test_steps_commit_in_order(self):
        machine = RankStateMachine()
        self._begin(machine)
        with pytest.raises(AllReduceError):
            machine.apply(3, CommitStep(session="s", ordinal=1, received=np.zeros(2)))

    def test_unstaged_input_is_refused(self):
        machine = RankStateMachine()
        begin = BeginSession(
            session="s", position=0, size=1, length=1, input_key="nope", ranks=("a",), addresses=(1,), coordinator=0
        )
        with pytest.raises(AllReduceError):
            machine.apply(1, begin)


class Collective:
    """Coordinator on node 0 and rank groups of `replicas` nodes each behind it."""

    def __init__(self, ranks: int, replicas: int, *, seed: int = 1, length: int = 10):
        size = 1 + ranks * replicas
        self.sim = Simulator(LatencyModel.constant(size, 10.0), seed=seed)
        self.nodes = [Node(self.sim, i) for i in range(size)]
        self.services = [RankService(n, RaftService(n)) for n in self.nodes]
        self.groups = {
            f"rank:{r}": list(range(1 + r * replicas, 1 + (r + 1) * replicas)) for r in range(ranks)
        }
        self.coordinator = CollectiveCoordinator(self.nodes[0], self.services[0], self.groups)
        rng = np.random.default_rng(seed)
        self.inputs = {g: rng.normal(size=length) for g in self.groups}
        self.length = length

    def setup(self) -> Process:
        node = self.nodes[0]
        for group, members in self.groups.items():
            for i, member in enumerate(members):
                yield node.request(member, HostRank(group=group, members=tuple(members), coordinator=0, campaign=i == 0))
        for group, members in self.groups.items():
            self.coordinator.seed_leader(group, members[0])
            yield from self.coordinator.leader_refresh(group, suspect=members[0])
        for group, vector in self.inputs.items():
            yield from self.coordinator.propose(group, StageInput(key="k", vector=vector, n=1))

    def reduce(self, before_session=None) -> SessionResult:
        def process() -> Process:
            yield from self.setup()
            if before_session is not None:
                before_session(self)
            result = yield from self.coordinator.run_session(list(self.groups), "k", self.length)
            return result

        return self.sim.execute(self.nodes[0], process(), limit=300_000)

    def expected(self, groups) -> np.ndarray:
        return np.sum([self.inputs[g] for g in groups], axis=0)


def test_replicated_ranks_reduce_to_the_sum():
    collective = Collective(4, 2)
    result = collective.reduce()
    assert result.ok and result.attempts == 1
    assert result.included == list(collective.groups)
    np.testing.assert_allclose(result.vector, collective.expected(collective.groups))


def test_odd_rank_count_is_padded_with_virtual_ranks():
    collective = Collective(3, 1, seed=2, length=7)
    result = collective.reduce()
    assert result.ok
    assert len(result.vector) == 7
    np.testing.assert_allclose(result.vector, collective.expected(collective.groups))
    assert collective.services[0].virtual == {}


def test_leader_crash_mid_session_is_absorbed_by_a_replica():
    collective = Collective(4, 3, seed=3)

    def crash_a_leader(c: Collective) -> None:
        leader = c.coordinator.leader("rank:1")
        c.sim.call_at(c.sim.now + 15, lambda: c.sim.crash(leader))

    result = collective.reduce(crash_a_leader)
    assert result.ok
    assert result.included == list(collective.groups)
    np.testing.assert_allclose(result.vector, collective.expected(collective.groups))
    assert result.lost == []


def test_lost_rank_is_dropped_and_the_survivors_reduce():
    collective = Collective(4, 2, seed=4)

    def lose_rank(c: Collective) -> None:
        for member in c.groups["rank:2"]:
            c.sim.crash(member)

    result = collective.reduce(lose_rank)
    assert result.ok
    assert result.lost == ["rank:2"]
    assert "rank:2" in collective.coordinator.lost
    survivors = [g for g in collective.groups if g != "rank:2"]
    assert result.included == survivors
    np.testing.assert_allclose(result.vector, collective.expected(survivors))
    events = [r.metric for r in collective.sim.metrics]
    assert "allreduce.rank_lost" in events
