"""
Numerical core of synchronous data-parallel SGD.

Pure numpy: a small tanh MLP with hand-written backward pass, the plain and
layer-wise adaptive (LARS) update rules, emulated half precision with loss
scaling, top-k gradient compression with error feedback, and the chunk ledger
that keeps every sample trained once per epoch when ranks are lost.

The simulated side (rank state machines, workers, the coordinator loop) lives
in hydrasim.trainer and calls into this module.
"""

import logging
import math
from collections import deque
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from enum import Enum
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self

import numpy as np
from pydantic import BaseModel, Field, model_validator

from hydrasim.config import LARS_EPSILON, LOSS_SCALE_GROWTH_INTERVAL, WARMUP_FRACTION
from hydrasim.models import HydraError

log = logging.getLogger(__name__)

Params = list[np.ndarray]
RoundFn = Callable[[np.ndarray], np.ndarray]


class TrainingError(HydraError):
    pass


class DivergenceError(TrainingError):
    pass


class PrecisionMode(str, Enum):
    FLOAT64 = "float64"
    MIXED = "mixed"


class TrainingJobConfig(BaseModel):
    """Optimizer, model and dataset settings of one training job."""

    global_batch: int = Field(ge=1)
    global_lr: float = Field(default=0.1, gt=0)
    trust: float = Field(default=0.001, gt=0, lt=1)
    weight_decay: float = Field(default=0.0, ge=0)
    use_lars: bool = False
    loss_scale: float = Field(default=1.0, ge=1)
    dynamic_loss_scale: bool = True
    precision: PrecisionMode = PrecisionMode.FLOAT64
    compression_k: int | None = Field(default=None, ge=1)
    max_steps: int = Field(default=10, ge=1)
    warmup: bool = False
    widths: list[int] = Field(default_factory=lambda: [4, 1], min_length=2)
    dataset_size: int = Field(default=64, ge=1)
    dataset_seed: int = 0
    noise: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _check(self) -> Self:
        mantissa, _ = math.frexp(self.loss_scale)
        if mantissa != 0.5:
            raise ValueError(f"loss_scale {self.loss_scale} is not a power of two")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")
        if self.compression_k is not None and self.compression_k > self.parameter_count:
            raise ValueError(f"compression_k {self.compression_k} exceeds {self.parameter_count} parameters")
        return self

    @property
    def parameter_count(self) -> int:
        return sum(a * b + b for a, b in zip(self.widths, self.widths[1:]))

    @property
    def mixed(self) -> bool:
        return self.precision is PrecisionMode.MIXED


# half precision


def round_half(x: np.ndarray | float) -> np.ndarray:
    """Round to the binary16 value set (nearest even), carried in float32."""
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float64).astype(np.float16).astype(np.float32)


def _identity(x: np.ndarray) -> np.ndarray:
    return x


@dataclass
class LossScaler:
    scale: float = 1.0
    dynamic: bool = True
    growth_interval: int = LOSS_SCALE_GROWTH_INTERVAL
    clean_steps: int = 0
    skipped: int = 0

    def update(self, overflow: bool) -> bool:
        """Record one step; returns True when the step must be skipped."""
        if overflow:
            self.skipped += 1
            self.clean_steps = 0
            if self.dynamic:
                self.scale = max(1.0, self.scale / 2)
            log.warning(f"gradient overflow, skipping step; loss scale now {self.scale}")
            return True
        self.clean_steps += 1
        if self.dynamic and self.clean_steps >= self.growth_interval:
            self.scale *= 2
            self.clean_steps = 0
        return False


# model


@dataclass(frozen=True)
class ToyModel:
    """MLP with tanh hidden layers, linear output and squared loss 0.5*|f(x) - y|^2."""

    widths: tuple[int, ...]

    @classmethod
    def from_config(cls, config: TrainingJobConfig) -> "ToyModel":
        return cls(tuple(config.widths))

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        shapes: list[tuple[int, ...]] = []
        for fan_in, fan_out in zip(self.widths, self.widths[1:]):
            shapes += [(fan_in, fan_out), (fan_out,)]
        return shapes

    @property
    def layers(self) -> int:
        return len(self.widths) - 1

    def init(self, rng: np.random.Generator) -> Params:
        params: Params = []
        for fan_in, fan_out in zip(self.widths, self.widths[1:]):
            params.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out)))
            params.append(np.zeros(fan_out))
        return params

    def forward(self, params: Params, x: np.ndarray, round_fn: RoundFn = _identity) -> list[np.ndarray]:
        """Activations per layer; the last one is the output."""
        activations = [round_fn(x)]
        h = activations[0]
        for layer in range(self.layers):
            w, b = params[2 * layer], params[2 * layer + 1]
            z = round_fn(h @ w + b)
            h = round_fn(np.tanh(z)) if layer < self.layers - 1 else z
            activations.append(h)
        return activations

    def loss_and_grads(
        self,
        params: Params,
        x: np.ndarray,
        y: np.ndarray,
        *,
        scale: float = 1.0,
        round_fn: RoundFn = _identity,
    ) -> tuple[float, Params]:
        """Summed loss over the rows of `x` and the summed gradients of `scale` times it."""
        activations = self.forward(params, x, round_fn)
        residual = activations[-1] - y
        loss = 0.5 * float(np.sum(np.square(residual, dtype=np.float64)))
        delta = round_fn(residual * scale)
        grads: Params = [np.empty(0)] * len(params)
        for layer in reversed(range(self.layers)):
            h = activations[layer]
            grads[2 * layer] = round_fn(h.T @ delta)
            grads[2 * layer + 1] = round_fn(delta.sum(axis=0))
            if layer:
                back = round_fn(delta @ params[2 * layer].T)
                delta = round_fn(back * (1.0 - np.square(h)))
        return loss, grads


def synthetic_dataset(config: TrainingJobConfig) -> tuple[np.ndarray, np.ndarray]:
    """Seeded regression data from a random linear map plus optional noise."""
    rng = np.random.default_rng(config.dataset_seed)
    d_in, d_out = config.widths[0], config.widths[-1]
    x = rng.normal(size=(config.dataset_size, d_in))
    a = rng.normal(size=(d_in, d_out)) / math.sqrt(d_in)
    y = x @ a
    if config.noise:
        y = y + rng.normal(scale=config.noise, size=y.shape)
    return x, y


def initial_params(config: TrainingJobConfig) -> Params:
    return ToyModel.from_config(config).init(np.random.default_rng([config.dataset_seed, 1]))


# gradients


@dataclass
class GradientSet:
    grads: Params
    n: int
    loss: float

    def flat(self) -> np.ndarray:
        return flatten(self.grads)


def local_gradients(
    model: ToyModel,
    params: Params,
    x: np.ndarray,
    y: np.ndarray,
    chunk: np.ndarray,
    *,
    scale: float = 1.0,
    half: bool = False,
) -> GradientSet:
    """Summed per-example gradients over the samples in `chunk`."""
    if len(chunk) == 0:
        raise TrainingError("empty chunk")
    round_fn = round_half if half else _identity
    working = [round_fn(p) for p in params] if half else params
    loss, grads = model.loss_and_grads(working, x[chunk], y[chunk], scale=scale, round_fn=round_fn)
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite loss over {len(chunk)} samples")
    if not half and not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError("non-finite gradient")
    return GradientSet(grads, len(chunk), loss)


def flatten(tensors: Sequence[np.ndarray]) -> np.ndarray:
    if not tensors:
        return np.zeros(0)
    return np.concatenate([np.ravel(t) for t in tensors])


def unflatten(vector: np.ndarray, shapes: Sequence[tuple[int, ...]]) -> Params:
    out: Params = []
    offset = 0
    for shape in shapes:
        size = math.prod(shape)
        out.append(vector[offset : offset + size].reshape(shape))
        offset += size
    if offset != len(vector):
        raise TrainingError(f"vector of {len(vector)} does not match {offset} parameters")
    return out


# updates


def sgd_update(params: Params, grad_sum: Params, n: int, lr: float) -> Params:
    """w' = w - lr * (1/n) * sum of gradients."""
    if n <= 0:
        return [p.copy() for p in params]
    return [w - lr * (g / n) for w, g in zip(params, grad_sum)]


def lars_local_lr(w: np.ndarray, grad: np.ndarray, trust: float, decay: float = 0.0) -> float:
    w_norm = float(np.linalg.norm(w))
    g_norm = float(np.linalg.norm(grad))
    denom = g_norm + decay * w_norm
    if denom == 0.0:
        return 0.0
    return trust * w_norm / (denom + LARS_EPSILON)


def lars_update(params: Params, grad_mean: Params, lr: float, trust: float, decay: float = 0.0) -> Params:
    """Per-layer step lr * local_lr * grad; a layer is a weight matrix or a bias vector."""
    return [w - lr * lars_local_lr(w, g, trust, decay) * g for w, g in zip(params, grad_mean)]


def warmup_lr(base: float, step: int, max_steps: int, fraction: float = WARMUP_FRACTION) -> float:
    """Linear ramp over the first `fraction` of the steps."""
    warm = max(1, math.ceil(fraction * max_steps))
    return base * min(1.0, (step + 1) / warm)


def step_lr(config: TrainingJobConfig, step: int) -> float:
    if config.warmup:
        return warmup_lr(config.global_lr, step, config.max_steps)
    return config.global_lr


def apply_update(params: Params, grad_sum: Params, n: int, config: TrainingJobConfig, step: int) -> Params:
    """One optimizer step from summed gradients; dtype follows `params`."""
    lr = step_lr(config, step)
    if n <= 0:
        return [p.copy() for p in params]
    if config.use_lars:
        mean = [g / n for g in grad_sum]
        updated = lars_update(params, mean, lr, config.trust, config.weight_decay)
    else:
        updated = sgd_update(params, grad_sum, n, lr)
    out = [u.astype(p.dtype, copy=False) for u, p in zip(updated, params)]
    if not all(np.all(np.isfinite(p)) for p in out):
        raise DivergenceError(f"non-finite weights after step {step}")
    return out


@dataclass
class MixedPrecisionResult:
    master: Params
    working: Params
    skipped: bool
    loss: float


def mixed_precision_step(
    model: ToyModel,
    master: Params,
    x: np.ndarray,
    y: np.ndarray,
    chunk: np.ndarray,
    scaler: LossScaler,
    config: TrainingJobConfig,
    step: int = 0,
) -> MixedPrecisionResult:
    """Half-precision forward/backward on a scaled loss, float32 master update."""
    grads = local_gradients(model, master, x, y, chunk, scale=scaler.scale, half=True)
    result = unscale_and_update(master, grads.grads, grads.n, scaler, config, step)
    return MixedPrecisionResult(result, [round_half(p) for p in result], result is master, grads.loss)


def unscale_and_update(
    master: Params, scaled_sum: Params, n: int, scaler: LossScaler, config: TrainingJobConfig, step: int
) -> Params:
    """Returns `master` itself when the scaled gradients overflowed.

    Unscales by the scale the gradients were computed at, before the scaler grows.
    Float64 masters stay float64; anything narrower is updated in float32.
    """
    overflow = not all(np.all(np.isfinite(g)) for g in scaled_sum)
    scale = scaler.scale
    if scaler.update(overflow):
        return master
    dtype = np.promote_types(master[0].dtype, np.float32)
    unscaled = [g.astype(dtype) / dtype.type(scale) for g in scaled_sum]
    return apply_update([p.astype(dtype) for p in master], unscaled, n, config, step)


# compression


@dataclass(frozen=True)
class SparseGradient:
    indices: np.ndarray
    values: np.ndarray
    length: int


def topk_compress(grad: np.ndarray, k: int, residual: np.ndarray | None = None) -> tuple[SparseGradient, np.ndarray]:
    """Keep the k largest magnitudes of grad + residual; the rest becomes the new residual."""
    accumulated = grad + residual if residual is not None else grad.copy()
    if not 1 <= k <= len(accumulated):
        raise TrainingError(f"k={k} outside [1, {len(accumulated)}]")
    order = np.argsort(-np.abs(accumulated), kind="stable")
    kept = np.sort(order[:k])
    values = accumulated[kept].copy()
    remainder = accumulated.copy()
    remainder[kept] = 0.0
    return SparseGradient(kept, values, len(accumulated)), remainder


def decompress(sparse: SparseGradient) -> np.ndarray:
    dense = np.zeros(sparse.length, dtype=sparse.values.dtype)
    dense[sparse.indices] = sparse.values
    return dense


# chunk ledger


@dataclass
class Chunk:
    indices: np.ndarray
    epochs: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @classmethod
    def empty(cls) -> "Chunk":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64))


@dataclass
class ChunkLedger:
    """Hands out sample indices per step so each index is trained once per epoch."""

    dataset_size: int
    rng: np.random.Generator
    epoch: int = 0
    cursor: int = 0
    permutation: np.ndarray = field(init=False)
    deferred: deque[Chunk] = field(default_factory=deque)
    trained: dict[int, np.ndarray] = field(default_factory=dict)
    outstanding: int = 0

    def __post_init__(self) -> None:
        if self.dataset_size < 1:
            raise TrainingError("dataset must hold at least one sample")
        self.permutation = self.rng.permutation(self.dataset_size)

    @property
    def deferred_samples(self) -> int:
        return sum(len(c) for c in self.deferred)

    def _take(self, count: int) -> Chunk:
        indices: list[np.ndarray] = []
        epochs: list[np.ndarray] = []
        while count and self.deferred:
            head = self.deferred.popleft()
            if len(head) > count:
                self.deferred.appendleft(Chunk(head.indices[count:], head.epochs[count:]))
                head = Chunk(head.indices[:count], head.epochs[:count])
            indices.append(head.indices)
            epochs.append(head.epochs)
            count -= len(head)
        while count:
            if self.cursor == self.dataset_size:
                self.epoch += 1
                self.cursor = 0
                self.permutation = self.rng.permutation(self.dataset_size)
            taken = self.permutation[self.cursor : self.cursor + count]
            self.cursor += len(taken)
            indices.append(taken)
            epochs.append(np.full(len(taken), self.epoch))
            count -= len(taken)
        if not indices:
            return Chunk.empty()
        return Chunk(np.concatenate(indices).astype(np.int64), np.concatenate(epochs).astype(np.int64))

    def assign(self, sizes: Sequence[int]) -> list[Chunk]:
        """Chunks for one step, deferred samples first."""
        if any(s < 0 for s in sizes):
            raise TrainingError(f"negative chunk size in {list(sizes)}")
        batch = self._take(sum(sizes))
        chunks: list[Chunk] = []
        offset = 0
        for size in sizes:
            chunks.append(Chunk(batch.indices[offset : offset + size], batch.epochs[offset : offset + size]))
            offset += size
        self.outstanding += len(batch)
        return chunks

    def complete(self, chunk: Chunk) -> None:
        for epoch in np.unique(chunk.epochs):
            mask = chunk.epochs == epoch
            counts = self.trained.setdefault(int(epoch), np.zeros(self.dataset_size, dtype=np.int64))
            np.add.at(counts, chunk.indices[mask], 1)
        self.outstanding -= len(chunk)

    def defer(self, chunk: Chunk) -> None:
        if len(chunk):
            self.deferred.append(chunk)
            self.outstanding -= len(chunk)

    def audit(self) -> list[str]:
        """Indices trained more than once in an epoch, or missing from a closed epoch."""
        problems: list[str] = []
        pending = {int(e) for c in self.deferred for e in c.epochs}
        for epoch, counts in sorted(self.trained.items()):
            twice = np.flatnonzero(counts > 1)
            if len(twice):
                problems.append(f"epoch {epoch}: indices trained twice {twice[:10].tolist()}")
            closed = epoch < self.epoch and epoch not in pending and self.outstanding == 0
            if closed and np.any(counts == 0):
                missing = np.flatnonzero(counts == 0)
                problems.append(f"epoch {epoch}: indices never trained {missing[:10].tolist()}")
        return problems


def handle_rank_loss(ledger: ChunkLedger, lost: dict[str, Chunk], step: int) -> int:
    """Defer the chunks of lost ranks to the next step; returns the number of deferred samples."""
    deferred = 0
    for rank, chunk in sorted(lost.items()):
        ledger.defer(chunk)
        deferred += len(chunk)
        log.warning(f"step {step}: rank {rank} lost, deferring {len(chunk)} samples")
    return deferred


# oracle


def full_batch_sgd(
    config: TrainingJobConfig, batches: Sequence[np.ndarray], params: Params | None = None
) -> Params:
    """Single-machine reference: the same steps on one device."""
    model = ToyModel.from_config(config)
    x, y = synthetic_dataset(config)
    weights = params if params is not None else initial_params(config)
    for step, batch in enumerate(batches):
        if len(batch) == 0:
            continue
        grads = local_gradients(model, weights, x, y, batch)
        weights = apply_update(weights, grads.grads, grads.n, config, step)
    return weights
