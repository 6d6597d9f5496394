"""
Batch placement policy.

A small feed-forward network maps a snapshot of the devices (pairwise latency
matrix, per-sample compute time, memory capacity) to a probability vector over
devices; the global batch is split in proportion to it. The network is trained
with REINFORCE against the simulated step latency, using an exponential moving
average of past rewards as the baseline.

During training the probability vector is perturbed by a Dirichlet draw whose
concentration grows as the temperature anneals, so late episodes explore less.
"""

import json
import logging
import math
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.special import digamma, gammaln

from hydrasim.allreduce import padded_size, pairing, schedule
from hydrasim.config import (
    BASELINE_DECAY,
    EXPLORATION_TAU_END,
    EXPLORATION_TAU_START,
    POLICY_HIDDEN_UNITS,
    POLICY_LEARNING_RATE,
)
from hydrasim.metrics import MetricsSink
from hydrasim.models import HydraError

log = logging.getLogger(__name__)


class PlacementError(HydraError):
    pass


class InfeasibleBatchError(PlacementError):
    pass


class PolicyDivergedError(PlacementError):
    pass


class EnvSnapshot(BaseModel):
    """What the coordinator knows about k candidate devices."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    latency: np.ndarray
    compute: np.ndarray
    memory: np.ndarray

    @field_validator("latency", "compute", "memory", mode="before")
    @classmethod
    def _as_array(cls, value: Any) -> np.ndarray:
        return np.asarray(value, dtype=np.float64)

    @model_validator(mode="after")
    def _check(self) -> Self:
        k = len(self.compute)
        if k == 0:
            raise ValueError("snapshot needs at least one device")
        if self.latency.shape != (k, k) or self.memory.shape != (k,):
            raise ValueError(f"shapes {self.latency.shape}, {self.compute.shape}, {self.memory.shape} disagree")
        if np.any(self.latency < 0) or not np.allclose(self.latency, self.latency.T):
            raise ValueError("latency matrix must be symmetric and non-negative")
        if np.any(np.diag(self.latency) != 0):
            raise ValueError("latency matrix must have a zero diagonal")
        if np.any(self.compute <= 0):
            raise ValueError("compute times must be positive")
        if np.any(self.memory < 1):
            raise ValueError("memory capacities must be at least one sample")
        return self

    @property
    def k(self) -> int:
        return len(self.compute)

    def features(self) -> np.ndarray:
        def scaled(a: np.ndarray) -> np.ndarray:
            top = float(np.max(a))
            return a / top if top > 0 else a

        return np.concatenate([scaled(self.latency).ravel(), scaled(self.compute), scaled(self.memory)])


def softmax(logits: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise PolicyDivergedError("policy diverged")
    shifted = np.exp(logits - np.max(logits))
    return shifted / shifted.sum()


def entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


# allocation


def allocate(p: np.ndarray, batch: int, memory: np.ndarray) -> np.ndarray:
    """Integer split of `batch` proportional to `p`, capped by `memory`."""
    caps = np.floor(np.asarray(memory)).astype(np.int64)
    if caps.sum() < batch:
        raise InfeasibleBatchError(f"infeasible batch: {batch} samples, capacity {int(caps.sum())}")
    raw = batch * np.asarray(p, dtype=np.float64)
    alloc = np.floor(raw).astype(np.int64)
    short = batch - int(alloc.sum())
    by_remainder = sorted(range(len(p)), key=lambda j: (-(raw[j] - alloc[j]), j))
    for j in by_remainder[:short]:
        alloc[j] += 1
    overflow = int(np.maximum(alloc - caps, 0).sum())
    alloc = np.minimum(alloc, caps)
    for j in sorted(range(len(p)), key=lambda j: (-p[j], j)):
        if overflow == 0:
            break
        room = int(caps[j] - alloc[j])
        moved = min(room, overflow)
        alloc[j] += moved
        overflow -= moved
    return alloc


def episode_latency(snapshot: EnvSnapshot, allocation: np.ndarray) -> float:
    """Slowest device's compute time plus the all-reduce steps among active devices."""
    allocation = np.asarray(allocation)
    active = [j for j in range(snapshot.k) if allocation[j] > 0]
    compute = float(max((snapshot.compute[j] * allocation[j] for j in active), default=0.0))
    if len(active) <= 1:
        return compute
    size = padded_size(len(active))
    comm = 0.0
    for phase, step in schedule(size):
        worst = 0.0
        for position in range(len(active)):
            partner = pairing(position, step, phase, size)
            if partner < len(active):
                worst = max(worst, float(snapshot.latency[active[position], active[partner]]))
        comm += worst
    return compute + comm


def _compositions(total: int, parts: int, caps: np.ndarray) -> Iterator[tuple[int, ...]]:
    if parts == 1:
        if total <= caps[0]:
            yield (total,)
        return
    for first in range(min(total, int(caps[0])) + 1):
        for rest in _compositions(total - first, parts - 1, caps[1:]):
            yield (first, *rest)


def brute_force_optimum(snapshot: EnvSnapshot, batch: int) -> tuple[np.ndarray, float]:
    """Exhaustive search over every feasible allocation; ties go to the first found."""
    caps = np.floor(snapshot.memory).astype(np.int64)
    if caps.sum() < batch:
        raise InfeasibleBatchError(f"infeasible batch: {batch} samples, capacity {int(caps.sum())}")
    best: tuple[np.ndarray, float] | None = None
    for combo in _compositions(batch, snapshot.k, caps):
        allocation = np.array(combo)
        latency = episode_latency(snapshot, allocation)
        if best is None or latency < best[1]:
            best = (allocation, latency)
    assert best is not None
    return best


# network


@dataclass
class PolicyNetwork:
    """One tanh hidden layer over the flattened snapshot, k logits out."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, k: int, rng: np.random.Generator, hidden: int = POLICY_HIDDEN_UNITS) -> Self:
        inputs = k * k + 2 * k
        # zero output layer: the untrained policy is uniform
        return cls(
            rng.normal(0.0, 1.0 / math.sqrt(inputs), size=(inputs, hidden)),
            np.zeros(hidden),
            np.zeros((hidden, k)),
            np.zeros(k),
        )

    @property
    def k(self) -> int:
        return len(self.b2)

    @property
    def params(self) -> list[np.ndarray]:
        return [self.w1, self.b1, self.w2, self.b2]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def load_flat(self, vector: np.ndarray) -> None:
        expected = sum(p.size for p in self.params)
        if expected != len(vector):
            raise PlacementError(f"checkpoint holds {len(vector)} values, network has {expected}")
        offset = 0
        for p in self.params:
            p[...] = vector[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def _hidden(self, x: np.ndarray) -> np.ndarray:
        return np.tanh(x @ self.w1 + self.b1)

    def logits(self, snapshot: EnvSnapshot) -> np.ndarray:
        if snapshot.k != self.k:
            raise PlacementError(f"policy built for {self.k} devices, snapshot has {snapshot.k}")
        return self._hidden(snapshot.features()) @ self.w2 + self.b2

    def forward(self, snapshot: EnvSnapshot) -> np.ndarray:
        return softmax(self.logits(snapshot))

    def backward(self, snapshot: EnvSnapshot, logit_grad: np.ndarray) -> list[np.ndarray]:
        """Parameter gradients given d(objective)/d(logits)."""
        x = snapshot.features()
        h = self._hidden(x)
        dh = self.w2 @ logit_grad
        da = dh * (1.0 - h * h)
        return [np.outer(x, da), da, np.outer(h, logit_grad), logit_grad.copy()]


def concentration(k: int, tau: float) -> float:
    return 2.0 * k / tau


def dirichlet_log_prob(q: np.ndarray, alpha: np.ndarray) -> float:
    return float(gammaln(alpha.sum()) - gammaln(alpha).sum() + np.sum((alpha - 1.0) * np.log(q)))


def dirichlet_logit_score(p: np.ndarray, q: np.ndarray, tau: float) -> np.ndarray:
    """d log Dir(q; kappa*p/tau) / d logits, where p = softmax(logits); q may hold one sample per row."""
    kappa = concentration(len(p), tau)
    alpha = kappa * p
    s = np.log(q) - digamma(alpha)
    return kappa * p * (s - np.expand_dims(s @ p, -1))


@dataclass
class Episode:
    snapshot: EnvSnapshot
    p: np.ndarray
    q: np.ndarray
    tau: float
    allocation: np.ndarray
    log_prob: float
    latency: float = math.nan

    @property
    def reward(self) -> float:
        return -self.latency


@dataclass
class PlacementPolicy:
    network: PolicyNetwork
    rng: np.random.Generator
    learning_rate: float = POLICY_LEARNING_RATE
    decay: float = BASELINE_DECAY
    tau_start: float = EXPLORATION_TAU_START
    tau_end: float = EXPLORATION_TAU_END
    baseline: float | None = None
    episodes: int = 0
    discarded: int = 0
    history: list[float] = field(default_factory=list)

    @classmethod
    def create(cls, k: int, seed: int = 0, **kwargs: Any) -> Self:
        rng = np.random.default_rng([seed, 0x9E3779B9])
        return cls(PolicyNetwork.init(k, rng), rng, **kwargs)

    def probabilities(self, snapshot: EnvSnapshot) -> np.ndarray:
        return self.network.forward(snapshot)

    def temperature(self, episode: int, total: int) -> float:
        if total <= 1:
            return self.tau_end
        frac = min(1.0, episode / (total - 1))
        return self.tau_start + (self.tau_end - self.tau_start) * frac

    def sample(self, snapshot: EnvSnapshot, batch: int, tau: float) -> Episode:
        p = self.probabilities(snapshot)
        alpha = concentration(snapshot.k, tau) * p
        q = self.rng.dirichlet(alpha)
        # keep log q finite
        q = np.clip(q, 1e-300, None)
        q = q / q.sum()
        allocation = allocate(q, batch, snapshot.memory)
        return Episode(snapshot, p, q, tau, allocation, dirichlet_log_prob(q, alpha))

    def greedy(self, snapshot: EnvSnapshot, batch: int) -> np.ndarray:
        return allocate(self.probabilities(snapshot), batch, snapshot.memory)

    def grad_log_prob(self, episode: Episode) -> list[np.ndarray]:
        return self.network.backward(episode.snapshot, dirichlet_logit_score(episode.p, episode.q, episode.tau))

    def update(self, episode: Episode) -> bool:
        """REINFORCE step with the moving-average baseline; False if the episode was discarded."""
        reward = episode.reward
        if self.baseline is None:
            self.baseline = reward
        advantage = reward - self.baseline
        grads = self.grad_log_prob(episode)
        if not math.isfinite(advantage) or not all(np.all(np.isfinite(g)) for g in grads):
            self.discarded += 1
            log.warning(f"discarding episode {self.episodes}: non-finite policy gradient")
            return False
        for param, grad in zip(self.network.params, grads):
            param += self.learning_rate * advantage * grad
        self.baseline = self.decay * self.baseline + (1.0 - self.decay) * reward
        self.episodes += 1
        self.history.append(episode.latency)
        return True

    def train(
        self,
        snapshot: EnvSnapshot,
        batch: int,
        episodes: int,
        latency: Callable[[EnvSnapshot, np.ndarray], float] = episode_latency,
        metrics: MetricsSink | None = None,
    ) -> list[float]:
        """Run `episodes` episodes against `latency`; returns the per-episode latencies."""
        out: list[float] = []
        for i in range(episodes):
            episode = self.sample(snapshot, batch, self.temperature(i, episodes))
            episode.latency = float(latency(snapshot, episode.allocation))
            self.update(episode)
            out.append(episode.latency)
            if metrics is not None:
                metrics.emit(
                    i,
                    None,
                    "placement.episode",
                    {
                        "latency": episode.latency,
                        "reward": episode.reward,
                        "baseline": self.baseline,
                        "entropy": entropy(episode.p),
                    },
                )
        return out

    # checkpoints

    def save(self, path: Path | str) -> None:
        header = {
            "k": self.network.k,
            "hidden": len(self.network.b1),
            "learning_rate": self.learning_rate,
            "decay": self.decay,
            "baseline": self.baseline,
            "episodes": self.episodes,
        }
        Path(path).write_text(json.dumps({"config": header, "params": self.network.flat().tolist()}))

    @classmethod
    def load(cls, path: Path | str, seed: int = 0) -> Self:
        data = json.loads(Path(path).read_text())
        header = data["config"]
        rng = np.random.default_rng([seed, 0x9E3779B9])
        network = PolicyNetwork.init(header["k"], rng, hidden=header["hidden"])
        network.load_flat(np.asarray(data["params"], dtype=np.float64))
        return cls(
            network,
            rng,
            learning_rate=header["learning_rate"],
            decay=header["decay"],
            baseline=header["baseline"],
            episodes=header["episodes"],
        )


