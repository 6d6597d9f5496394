from typing import Literal

import numpy as np
import pytest
from pydantic import ValidationError

from hydrasim.models import Message
from hydrasim.sim import (
    Envelope,
    FaultAction,
    FaultEntry,
    FaultSchedule,
    LatencyModel,
    Node,
    Process,
    SimulationError,
    Simulator,
)


class Ping(Message):
    kind: Literal["PING"] = "PING"
    n: int = 0


class Pong(Message):
    kind: Literal["PONG"] = "PONG"
    n: int = 0


def echo(node: Node) -> Node:
    node.on(Ping, lambda env: Pong(n=env.payload.n))
    return node


def test_request_reply_takes_one_round_trip(sim: Simulator):
    a, b = Node(sim, 0), echo(Node(sim, 1))

    def call() -> Process:
        reply = yield a.request(b.node_id, Ping(n=7))
        return reply, a.now

    reply, at = sim.execute(a, call())
    assert reply == Pong(n=7)
    assert at == 20


def test_request_to_crashed_node_times_out(sim: Simulator):
    a, b = Node(sim, 0), echo(Node(sim, 1))
    sim.crash(b.node_id)

    def call() -> Process:
        reply = yield a.request(b.node_id, Ping(), timeout=50)
        return reply, a.now

    assert sim.execute(a, call()) == (None, 50)
    assert sim.messages_dropped == 1


def test_crash_drops_messages_in_flight(sim: Simulator):
    a, b = Node(sim, 0), Node(sim, 1)
    seen: list[int] = []
    b.on(Ping, lambda env: seen.append(env.payload.n))
    a.send(1, Ping(n=1))
    sim.call_at(5, lambda: sim.crash(1))
    sim.call_at(6, lambda: sim.restart(1))
    sim.run_until(100)
    assert seen == []
    a.send(1, Ping(n=2))
    sim.run_for(100)
    assert seen == [2]


def test_generator_handler_replies_with_its_return_value(sim: Simulator):
    a, b = Node(sim, 0), Node(sim, 1)

    def slow(envelope: Envelope) -> Process:
        yield b.sleep(30)
        return Pong(n=envelope.payload.n + 1)

    b.on(Ping, slow)

    def call() -> Process:
        reply = yield a.request(1, Ping(n=1), timeout=1_000)
        return reply, a.now

    assert sim.execute(a, call()) == (Pong(n=2), 50)


def test_partition_blocks_both_directions_until_heal(sim: Simulator):
    a, b = Node(sim, 0), echo(Node(sim, 1))
    sim.partition([0], [1, 2])
    assert sim.partitioned(1, 0)

    def call() -> Process:
        reply = yield a.request(1, Ping(), timeout=100)
        return reply

    assert sim.execute(a, call()) is None
    sim.heal()
    assert sim.execute(a, call()) == Pong()


def test_crash_interrupts_node_processes(sim: Simulator):
    a = Node(sim, 0)
    finished: list[bool] = []

    def long() -> Process:
        yield a.sleep(1_000)
        finished.append(True)

    a.spawn(long())
    sim.call_at(10, lambda: sim.crash(0))
    sim.run_until(2_000)
    assert finished == []
    with pytest.raises(SimulationError, match="crashed node 0"):
        a.spawn(long())


def test_handler_failure_carries_node_and_time(sim: Simulator):
    a, b = Node(sim, 0), Node(sim, 1)
    b.on(Ping, lambda env: 1 / 0)
    a.send(1, Ping())
    with pytest.raises(SimulationError, match=r"PING failed on node 1 at t=10"):
        sim.run_until(100)


def test_scheduled_faults_fire_at_their_time(sim: Simulator):
    Node(sim, 0)
    Node(sim, 1)
    schedule = FaultSchedule(
        entries=[
            FaultEntry(time=10, action=FaultAction(op="crash", node=1)),
            FaultEntry(time=20, action=FaultAction(op="restart", node=1)),
        ]
    )
    sim.schedule_faults(schedule)
    sim.run_until(15)
    assert not sim.is_online(1)
    sim.run_until(25)
    assert sim.is_online(1)
    assert [r.metric for r in sim.metrics] == ["node.crash", "node.restart"]


def test_fault_schedule_must_be_sorted():
    with pytest.raises(ValidationError, match="sorted"):
        FaultSchedule(
            entries=[
                FaultEntry(time=20, action=FaultAction(op="heal")),
                FaultEntry(time=10, action=FaultAction(op="heal")),
            ]
        )


def test_partition_sets_must_be_disjoint():
    with pytest.raises(ValidationError, match="disjoint"):
        FaultAction(op="partition", set_a=(1, 2), set_b=(2, 3))


def test_latency_matrix_must_be_symmetric():
    with pytest.raises(ValidationError, match="symmetric"):
        LatencyModel(base=[[0, 1], [2, 0]])


def test_planar_latency_is_a_metric():
    model = LatencyModel.planar(12, min_ms=5, max_ms=50, seed=4)
    base = model.base
    assert np.array_equal(base, base.T)
    assert np.all(np.diag(base) == 0)
    off = base[~np.eye(12, dtype=bool)]
    assert off.min() >= 5 and off.max() <= 50


def test_rpc_timeout_follows_max_latency():
    assert Simulator(LatencyModel.constant(3, 12.5)).rpc_timeout == 50


def test_run_until_advances_the_clock_without_events(sim: Simulator):
    sim.run_until(1234)
    assert sim.now == 1234
    with pytest.raises(SimulationError):
        sim.run_until(10)


def _chatter(seed: int) -> list[tuple]:
    sim = Simulator(LatencyModel.planar(6, min_ms=5, max_ms=40, seed=2, jitter_fraction=0.3), seed=seed, trace=True)
    nodes = [echo(Node(sim, i)) for i in range(6)]

    def talk(node: Node) -> Process:
        rng = node.rng("talk")
        for n in range(20):
            yield node.request(int(rng.integers(0, 6)), Ping(n=n))

    for node in nodes:
        node.spawn(talk(node))
    sim.run_until(5_000)
    return sim.trace


def test_same_seed_gives_identical_traces():
    assert _chatter(3) == _chatter(3)
    assert _chatter(3) != _chatter(4)


def test_named_streams_are_independent_of_creation_order():
    s1, s2 = Simulator(LatencyModel.constant(1, 1), seed=9), Simulator(LatencyModel.constant(1, 1), seed=9)
    s1.rng("other").random()
    assert s1.rng("dht").random() == s2.rng("dht").random()
