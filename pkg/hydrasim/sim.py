"""
Discrete-event engine.

Virtual time is integer milliseconds. Message delivery, timers and node
processes all run on one simpy environment, so a run is a pure function of
its configuration and seed; events at equal time fire in scheduling order.

Nodes crash and restart under a FaultSchedule. A crash drops the inbox,
cancels pending requests and interrupts every process the node owns.

See: docs/adr/ADR-001-deterministic-simulation-and-fault-model.md
"""

import hashlib
import inspect
import logging
import math
from collections.abc import Callable, Generator, Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any, Literal
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np
import simpy
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from hydrasim.config import RPC_TIMEOUT_FACTOR
from hydrasim.metrics import MetricsSink
from hydrasim.models import HydraError, Message

log = logging.getLogger(__name__)

SimTime = int
Process = Generator[simpy.Event, Any, Any]


class SimulationError(HydraError):
    pass


class NodeStatus(str, Enum):
    ONLINE = "online"
    CRASHED = "crashed"


class LatencyModel(BaseModel):
    """Pairwise base latency in ms plus multiplicative jitter."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    base: np.ndarray
    jitter_fraction: float = Field(default=0.0, ge=0.0, lt=1.0)
    rng_seed: int = 0

    @field_validator("base", mode="before")
    @classmethod
    def _check_matrix(cls, value: Any) -> np.ndarray:
        base = np.array(value, dtype=np.float64)
        if base.ndim != 2 or base.shape[0] != base.shape[1]:
            raise ValueError("latency matrix must be square")
        if not np.all(np.isfinite(base)) or np.any(base < 0):
            raise ValueError("latencies must be finite and non-negative")
        if not np.array_equal(base, base.T):
            raise ValueError("latency matrix must be symmetric")
        if np.any(np.diag(base) != 0):
            raise ValueError("latency matrix must have a zero diagonal")
        return base

    @property
    def size(self) -> int:
        return int(self.base.shape[0])

    @property
    def max_base(self) -> float:
        return float(self.base.max()) if self.base.size else 0.0

    def sample(self, a: int, b: int, rng: np.random.Generator) -> SimTime:
        latency = float(self.base[a, b])
        if self.jitter_fraction > 0.0:
            latency *= 1.0 + rng.uniform(-self.jitter_fraction, self.jitter_fraction)
        return int(round(latency))

    @classmethod
    def constant(cls, n: int, ms: float, *, jitter_fraction: float = 0.0, rng_seed: int = 0) -> Self:
        base = np.full((n, n), float(ms))
        np.fill_diagonal(base, 0.0)
        return cls(base=base, jitter_fraction=jitter_fraction, rng_seed=rng_seed)

    @classmethod
    def planar(
        cls,
        n: int,
        *,
        min_ms: float,
        max_ms: float,
        seed: int,
        jitter_fraction: float = 0.0,
    ) -> Self:
        """Latency grows with distance between random points on the unit square."""
        rng = np.random.default_rng(seed)
        points = rng.random((n, 2))
        dist = np.sqrt(((points[:, None, :] - points[None, :, :]) ** 2).sum(axis=-1))
        base = np.round(min_ms + dist / math.sqrt(2.0) * (max_ms - min_ms), 3)
        base = np.minimum(base, base.T)
        np.fill_diagonal(base, 0.0)
        return cls(base=base, jitter_fraction=jitter_fraction, rng_seed=seed)


class FaultAction(BaseModel):
    model_config = ConfigDict(frozen=True)

    op: Literal["crash", "restart", "partition", "heal"]
    node: int | None = None
    set_a: tuple[int, ...] = ()
    set_b: tuple[int, ...] = ()

    @model_validator(mode="after")
    def _check_operands(self) -> Self:
        if self.op in ("crash", "restart") and self.node is None:
            raise ValueError(f"{self.op} needs a node")
        if self.op == "partition":
            if not self.set_a or not self.set_b:
                raise ValueError("partition needs two non-empty sets")
            if set(self.set_a) & set(self.set_b):
                raise ValueError("partition sets must be disjoint")
        return self

    def nodes(self) -> set[int]:
        refs = set(self.set_a) | set(self.set_b)
        if self.node is not None:
            refs.add(self.node)
        return refs


class FaultEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    time: SimTime = Field(ge=0)
    action: FaultAction


class FaultSchedule(BaseModel):
    entries: list[FaultEntry] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_sorted(self) -> Self:
        times = [e.time for e in self.entries]
        if times != sorted(times):
            raise ValueError("fault entries must be sorted by time")
        return self

    def nodes(self) -> set[int]:
        refs: set[int] = set()
        for entry in self.entries:
            refs |= entry.action.nodes()
        return refs


@dataclass(slots=True)
class Envelope:
    seq: int
    src: int
    dst: int
    payload: Message
    sent_at: SimTime
    rpc_id: int | None = None
    is_reply: bool = False


Handler = Callable[[Envelope], Any]


class Node:
    """
    A simulated host. Services attach message handlers and crash/restart hooks.

    A handler returns a reply payload, None, or a generator; a generator is run
    as a node process and its return value becomes the reply.
    """

    def __init__(self, sim: "Simulator", node_id: int, *, name: str | None = None):
        self.sim = sim
        self.node_id = node_id
        self.name = name or f"node-{node_id}"
        self.status = NodeStatus.ONLINE
        self.incarnation = 0
        self.inbox: dict[int, Envelope] = {}
        self._handlers: dict[type[Message], Handler] = {}
        self._pending: dict[int, simpy.Event] = {}
        self._processes: set[simpy.Process] = set()
        self._crash_hooks: list[Callable[[], None]] = []
        self._restart_hooks: list[Callable[[], None]] = []
        sim.add_node(self)

    def __repr__(self) -> str:
        return f"<{type(self).__name__} {self.node_id} {self.status.value}>"

    @property
    def online(self) -> bool:
        return self.status is NodeStatus.ONLINE

    @property
    def now(self) -> SimTime:
        return self.sim.now

    def on(self, kind: type[Message], handler: Handler) -> None:
        self._handlers[kind] = handler

    def on_crash(self, hook: Callable[[], None]) -> None:
        self._crash_hooks.append(hook)

    def on_restart(self, hook: Callable[[], None]) -> None:
        self._restart_hooks.append(hook)

    def send(self, dst: int, payload: Message) -> bool:
        return self.sim.send(self.node_id, dst, payload)

    def request(self, dst: int, payload: Message, timeout: SimTime | None = None) -> simpy.Event:
        """Event whose value is the reply payload, or None after `timeout`."""
        env = self.sim.env
        done = env.event()
        if not self.online:
            done.succeed(None)
            return done
        rpc_id = self.sim.next_rpc_id()
        self._pending[rpc_id] = done
        self.sim.send(self.node_id, dst, payload, rpc_id=rpc_id)

        def expire(_: simpy.Event) -> None:
            if self._pending.pop(rpc_id, None) is not None and not done.triggered:
                done.succeed(None)

        env.timeout(timeout if timeout is not None else self.sim.rpc_timeout).callbacks.append(expire)
        return done

    def reply(self, envelope: Envelope, payload: Message) -> bool:
        if envelope.rpc_id is None:
            return False
        return self.sim.send(self.node_id, envelope.src, payload, rpc_id=envelope.rpc_id, is_reply=True)

    def spawn(self, process: Process) -> simpy.Process:
        if not self.online:
            raise SimulationError(f"cannot start a process on crashed node {self.node_id}")
        proc = self.sim.env.process(self._guarded(process))
        self._processes.add(proc)
        proc.callbacks.append(self._reap)
        return proc

    def _guarded(self, process: Process) -> Process:
        try:
            return (yield from process)
        except simpy.Interrupt:
            return None
        except HydraError:
            raise
        except Exception as e:
            raise SimulationError(
                f"process on node {self.node_id} failed at t={self.sim.now}: {e!r}"
            ) from e

    def _reap(self, proc: simpy.Event) -> None:
        self._processes.discard(proc)  # type: ignore[arg-type]
        if not proc.ok and isinstance(proc.value, simpy.Interrupt):
            proc.defused = True

    def sleep(self, delay: SimTime) -> simpy.Event:
        return self.sim.env.timeout(delay)

    def after(self, delay: SimTime, fn: Callable[[], None]) -> None:
        """Run `fn` after `delay` unless the node crashed in between."""
        incarnation = self.incarnation

        def fire(_: simpy.Event) -> None:
            if self.online and self.incarnation == incarnation:
                self.sim.invoke(self, fn, "timer")

        self.sim.env.timeout(delay).callbacks.append(fire)

    def collect(self, events: Sequence[simpy.Event]) -> Generator[simpy.Event, Any, list[Any]]:
        if not events:
            return []
        values = yield self.sim.env.all_of(list(events))
        return [values[e] for e in events]

    def event(self) -> simpy.Event:
        return self.sim.env.event()

    def rng(self, purpose: str) -> np.random.Generator:
        return self.sim.rng(f"node:{self.node_id}:{purpose}")

    def emit(self, metric: str, value: Any) -> None:
        self.sim.metrics.emit(self.sim.now, self.node_id, metric, value)


class Simulator:
    """Owns the clock, the nodes, the transport and the fault injector."""

    def __init__(
        self,
        latency: LatencyModel,
        *,
        seed: int = 0,
        trace: bool = False,
        metrics: MetricsSink | None = None,
    ):
        self.env = simpy.Environment()
        self.latency = latency
        self.seed = seed
        self.nodes: dict[int, Node] = {}
        self.metrics = metrics or MetricsSink()
        self.trace_enabled = trace
        self.trace: list[tuple[Any, ...]] = []
        self.messages_sent = 0
        self.messages_dropped = 0
        self._seq = 0
        self._rpc = 0
        self._rngs: dict[str, np.random.Generator] = {}
        self._latency_rng = np.random.default_rng(latency.rng_seed)
        self._partitions: list[tuple[frozenset[int], frozenset[int]]] = []
        self.rpc_timeout: SimTime = max(1, int(math.ceil(RPC_TIMEOUT_FACTOR * latency.max_base)))

    @property
    def now(self) -> SimTime:
        return int(self.env.now)

    def add_node(self, node: Node) -> None:
        if node.node_id in self.nodes:
            raise SimulationError(f"duplicate node id {node.node_id}")
        if node.node_id >= self.latency.size:
            raise SimulationError(f"node {node.node_id} has no row in the latency matrix")
        self.nodes[node.node_id] = node

    def node(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def is_online(self, node_id: int) -> bool:
        node = self.nodes.get(node_id)
        return node is not None and node.online

    def rng(self, stream: str) -> np.random.Generator:
        gen = self._rngs.get(stream)
        if gen is None:
            digest = int.from_bytes(hashlib.sha256(stream.encode()).digest()[:8], "big")
            gen = np.random.default_rng([self.seed, digest])
            self._rngs[stream] = gen
        return gen

    def next_rpc_id(self) -> int:
        self._rpc += 1
        return self._rpc

    def _record(self, *entry: Any) -> None:
        if self.trace_enabled:
            self.trace.append((self.now, *entry))

    # transport

    def partitioned(self, a: int, b: int) -> bool:
        for side_a, side_b in self._partitions:
            if (a in side_a and b in side_b) or (a in side_b and b in side_a):
                return True
        return False

    def send(
        self,
        src: int,
        dst: int,
        payload: Message,
        *,
        rpc_id: int | None = None,
        is_reply: bool = False,
    ) -> bool:
        """Schedule delivery; silently drop when either end is down or partitioned apart."""
        sender = self.nodes[src]
        target = self.nodes.get(dst)
        if target is None or not sender.online or not target.online or self.partitioned(src, dst):
            self.messages_dropped += 1
            self._record("drop", src, dst, payload.kind)
            return False
        self._seq += 1
        envelope = Envelope(self._seq, src, dst, payload, self.now, rpc_id, is_reply)
        target.inbox[envelope.seq] = envelope
        delay = self.latency.sample(src, dst, self._latency_rng)
        self.env.timeout(delay).callbacks.append(lambda _ev: self._deliver(envelope))
        self.messages_sent += 1
        self._record("send", envelope.seq, src, dst, payload.kind)
        return True

    def _deliver(self, envelope: Envelope) -> None:
        node = self.nodes[envelope.dst]
        if node.inbox.pop(envelope.seq, None) is None:
            return
        self._record("deliver", envelope.seq, envelope.src, envelope.dst, envelope.payload.kind)
        if envelope.is_reply:
            waiter = node._pending.pop(envelope.rpc_id, None)  # type: ignore[arg-type]
            if waiter is not None and not waiter.triggered:
                waiter.succeed(envelope.payload)
            return
        handler = node._handlers.get(type(envelope.payload))
        if handler is None:
            log.debug(f"node {node.node_id} has no handler for {envelope.payload.kind}")
            return
        result = self.invoke(node, lambda: handler(envelope), envelope.payload.kind)
        if inspect.isgenerator(result):
            node.spawn(self._respond(node, envelope, result))
        elif result is not None:
            node.reply(envelope, result)

    def _respond(self, node: Node, envelope: Envelope, process: Process) -> Process:
        result = yield from process
        if result is not None:
            node.reply(envelope, result)

    def invoke(self, node: Node, fn: Callable[[], Any], what: str) -> Any:
        try:
            return fn()
        except HydraError:
            raise
        except Exception as e:
            raise SimulationError(
                f"handler {what} failed on node {node.node_id} at t={self.now}: {e!r}"
            ) from e

    # faults

    def crash(self, node_id: int) -> None:
        node = self.nodes[node_id]
        if not node.online:
            return
        node.status = NodeStatus.CRASHED
        node.incarnation += 1
        node.inbox.clear()
        node._pending.clear()
        for proc in list(node._processes):
            if proc.is_alive:
                proc.interrupt("crash")
        node._processes.clear()
        for hook in node._crash_hooks:
            hook()
        self._record("crash", node_id)
        self.metrics.emit(self.now, node_id, "node.crash", 1)
        log.info(f"t={self.now} node {node_id} crashed")

    def restart(self, node_id: int) -> None:
        node = self.nodes[node_id]
        if node.online:
            return
        node.status = NodeStatus.ONLINE
        self._record("restart", node_id)
        self.metrics.emit(self.now, node_id, "node.restart", 1)
        log.info(f"t={self.now} node {node_id} restarted")
        for hook in node._restart_hooks:
            self.invoke(node, hook, "restart")

    def partition(self, set_a: Sequence[int], set_b: Sequence[int]) -> None:
        a, b = frozenset(set_a), frozenset(set_b)
        if a & b:
            raise SimulationError("partition sets must be disjoint")
        self._partitions.append((a, b))
        self._record("partition", tuple(sorted(a)), tuple(sorted(b)))
        self.metrics.emit(self.now, None, "net.partition", len(a) + len(b))

    def heal(self) -> None:
        self._partitions.clear()
        self._record("heal")
        self.metrics.emit(self.now, None, "net.heal", 1)

    def apply_fault(self, action: FaultAction) -> None:
        match action.op:
            case "crash":
                self.crash(action.node)  # type: ignore[arg-type]
            case "restart":
                self.restart(action.node)  # type: ignore[arg-type]
            case "partition":
                self.partition(action.set_a, action.set_b)
            case "heal":
                self.heal()

    def schedule_faults(self, schedule: FaultSchedule) -> None:
        for entry in schedule.entries:
            if entry.time < self.now:
                raise SimulationError(f"fault at t={entry.time} is in the past")
            action = entry.action
            self.env.timeout(entry.time - self.now).callbacks.append(
                lambda _ev, a=action: self.apply_fault(a)
            )

    def call_at(self, time: SimTime, fn: Callable[[], None]) -> None:
        if time < self.now:
            raise SimulationError(f"cannot schedule at t={time} before now={self.now}")
        self.env.timeout(time - self.now).callbacks.append(lambda _ev: fn())

    # running

    def run_until(self, t: SimTime) -> int:
        """Process every event with time <= t, then set the clock to t."""
        if t < self.now:
            raise SimulationError(f"run_until({t}) is before now={self.now}")
        processed = 0
        while self.env.peek() <= t:
            self.env.step()
            processed += 1
        if self.now < t:
            self.env.run(until=t)
        return processed

    def run_for(self, duration: SimTime) -> int:
        return self.run_until(self.now + duration)

    def execute(self, node: Node, process: Process, *, limit: SimTime | None = None) -> Any:
        """Run until `process` (spawned on `node`) finishes; returns its value."""
        proc = node.spawn(process)
        deadline = math.inf if limit is None else self.now + limit
        while not proc.triggered and self.env.peek() <= deadline:
            self.env.step()
        if not proc.triggered:
            raise SimulationError(f"process on node {node.node_id} did not finish by t={deadline}")
        # drain same-tick bookkeeping so the process value is settled
        while not proc.processed and self.env.peek() <= self.now:
            self.env.step()
        return proc.value if proc.ok else None
