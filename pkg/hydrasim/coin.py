"""
Hydra coin ledger.

An append-only event log of rewards, penalties and spends with balances kept
as exact fractions, so that replaying the log from zero reproduces every
balance exactly. Coin and VCU exchange 1:1.

The ledger lives on the primary bootstrap server; LedgerService exposes it
to the rest of the network.
"""

import logging
from dataclasses import asdict, dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Literal

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import expit

from hydrasim.config import BYTES_PER_MB, DIVERSITY_CAP, DIVERSITY_STEP
from hydrasim.models import Ack, ErrorReply, HydraError, Message
from hydrasim.sim import Envelope, Node

log = logging.getLogger(__name__)


class CoinError(HydraError):
    pass


class InsufficientFundsError(CoinError):
    def __init__(self, peer: int, balance: Fraction, amount: Fraction):
        super().__init__(f"peer {peer} holds {float(balance):.6g} coin, needs {float(amount):.6g}")
        self.peer = peer
        self.balance = balance
        self.amount = amount


class RewardKind(str, Enum):
    CONTRIBUTION = "contribution"
    VALIDATION = "validation"
    ANNOTATION = "annotation"
    TRAINING_STEP = "training_step"
    SEEDING = "seeding"
    PENALTY = "penalty"
    SPEND = "spend"
    GRANT = "grant"


BYTE_KINDS = frozenset({RewardKind.CONTRIBUTION, RewardKind.SEEDING})


class CoinRates(BaseModel):
    """Coin per unit of basis. Byte-based channels are priced per MB."""

    model_config = ConfigDict(frozen=True)

    contribution_per_mb: float = Field(default=1.0, ge=0)
    validation_per_item: float = Field(default=0.1, ge=0)
    annotation_per_item: float = Field(default=0.2, ge=0)
    training_per_vcu: float = Field(default=1.0, ge=0)
    seeding_per_mb: float = Field(default=0.5, ge=0)
    penalty_per_item: float = Field(default=0.5, ge=0)
    diversity_bonus: bool = True

    @field_validator("*", mode="before")
    @classmethod
    def _no_nan(cls, value: object) -> object:
        if isinstance(value, float) and value != value:
            raise ValueError("rate must be a number")
        return value

    def rate(self, kind: RewardKind) -> Fraction:
        table = {
            RewardKind.CONTRIBUTION: self.contribution_per_mb,
            RewardKind.VALIDATION: self.validation_per_item,
            RewardKind.ANNOTATION: self.annotation_per_item,
            RewardKind.TRAINING_STEP: self.training_per_vcu,
            RewardKind.SEEDING: self.seeding_per_mb,
            RewardKind.PENALTY: self.penalty_per_item,
            RewardKind.SPEND: 1.0,
            RewardKind.GRANT: 1.0,
        }
        return Fraction(str(table[kind]))


def vcu(t_b_ms: float, t_m_ms: float, samples: float) -> float:
    """Virtual compute units: sigmoid(t_b - t_m) * A with times in seconds."""
    if t_b_ms <= 0 or t_m_ms <= 0:
        raise CoinError("step times must be positive")
    if samples < 0:
        raise CoinError("sample count must be non-negative")
    return float(expit((t_b_ms - t_m_ms) / 1000.0)) * samples


def diversity_multiplier(datasets: int) -> Fraction:
    if datasets <= 1:
        return Fraction(1)
    bonus = 1 + Fraction(str(DIVERSITY_STEP)) * (datasets - 1)
    return min(bonus, Fraction(str(DIVERSITY_CAP)))


@dataclass(frozen=True)
class RewardEvent:
    seq: int
    time: int
    kind: RewardKind
    peer: int
    basis: Fraction
    amount: Fraction
    multiplier: Fraction = Fraction(1)
    shortfall: Fraction = Fraction(0)
    key: str | None = None
    dataset: int | None = None


class Ledger:
    def __init__(self, rates: CoinRates | None = None):
        self.rates = rates or CoinRates()
        self.balances: dict[int, Fraction] = {}
        self.events: list[RewardEvent] = []
        self._keys: set[str] = set()
        self._datasets: dict[int, set[int]] = {}

    def balance(self, peer: int) -> Fraction:
        return self.balances.get(peer, Fraction(0))

    def seen(self, key: str) -> bool:
        return key in self._keys

    def _record(self, event: RewardEvent) -> Fraction:
        self.events.append(event)
        if event.key is not None:
            self._keys.add(event.key)
        new_balance = self.balance(event.peer) + event.amount
        self.balances[event.peer] = new_balance
        return new_balance

    def award(
        self,
        kind: RewardKind,
        peer: int,
        basis: int | float | Fraction,
        time: int = 0,
        *,
        key: str | None = None,
        dataset: int | None = None,
    ) -> Fraction:
        """Credit `peer`; events with a key already in the log are ignored."""
        if kind in (RewardKind.PENALTY, RewardKind.SPEND):
            raise CoinError(f"{kind.value} is not a reward")
        if key is not None and key in self._keys:
            return self.balance(peer)
        basis = Fraction(basis)
        if basis < 0:
            raise CoinError("reward basis must be non-negative")
        units = basis / BYTES_PER_MB if kind in BYTE_KINDS else basis
        multiplier = Fraction(1)
        if kind is RewardKind.CONTRIBUTION and dataset is not None:
            seen = self._datasets.setdefault(peer, set())
            seen.add(dataset)
            if self.rates.diversity_bonus:
                multiplier = diversity_multiplier(len(seen))
        amount = self.rates.rate(kind) * units * multiplier
        return self._record(
            RewardEvent(len(self.events), time, kind, peer, basis, amount, multiplier, key=key, dataset=dataset)
        )

    def penalize(self, peer: int, items: int | Fraction, time: int = 0, *, key: str | None = None) -> Fraction:
        """Debit `peer`; the balance floors at zero and the shortfall is logged."""
        if key is not None and key in self._keys:
            return self.balance(peer)
        basis = Fraction(items)
        wanted = self.rates.rate(RewardKind.PENALTY) * basis
        applied = min(wanted, self.balance(peer))
        shortfall = wanted - applied
        if shortfall:
            log.warning(f"penalty on peer {peer} short by {float(shortfall):.6g} coin")
        return self._record(
            RewardEvent(len(self.events), time, RewardKind.PENALTY, peer, basis, -applied, shortfall=shortfall, key=key)
        )

    def spend(self, peer: int, amount: int | float | Fraction, time: int = 0, *, key: str | None = None) -> Fraction:
        amount = Fraction(amount)
        if amount <= 0:
            raise CoinError("spend amount must be positive")
        if key is not None and key in self._keys:
            return self.balance(peer)
        if self.balance(peer) < amount:
            raise InsufficientFundsError(peer, self.balance(peer), amount)
        return self._record(RewardEvent(len(self.events), time, RewardKind.SPEND, peer, amount, -amount, key=key))

    def total(self, kind: RewardKind, peer: int | None = None) -> Fraction:
        return sum(
            (e.amount for e in self.events if e.kind is kind and (peer is None or e.peer == peer)),
            Fraction(0),
        )

    def replay(self) -> dict[int, Fraction]:
        balances: dict[int, Fraction] = {}
        for e in self.events:
            balances[e.peer] = balances.get(e.peer, Fraction(0)) + e.amount
        return balances

    def audit(self) -> list[str]:
        problems: list[str] = []
        replayed = self.replay()
        for peer in set(replayed) | set(self.balances):
            if replayed.get(peer, Fraction(0)) != self.balance(peer):
                problems.append(f"peer {peer}: replay {replayed.get(peer)} != balance {self.balance(peer)}")
            if self.balance(peer) < 0:
                problems.append(f"peer {peer}: negative balance")
        return problems

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for e in self.events:
            row = asdict(e)
            row["kind"] = e.kind.value
            for name in ("basis", "amount", "multiplier", "shortfall"):
                row[name] = float(row[name])
            rows.append(row)
        columns = ["seq", "time", "kind", "peer", "basis", "amount", "multiplier", "shortfall", "key", "dataset"]
        return pd.DataFrame(rows, columns=columns)

    def export_csv(self, path: Path) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False)
        return path


class CoinAward(Message):
    kind: Literal["COIN_AWARD"] = "COIN_AWARD"
    channel: RewardKind
    peer: int
    basis: int | float
    key: str | None = None
    dataset: int | None = None


class CoinPenalty(Message):
    kind: Literal["COIN_PENALTY"] = "COIN_PENALTY"
    peer: int
    items: int
    key: str | None = None


class CoinSpend(Message):
    kind: Literal["COIN_SPEND"] = "COIN_SPEND"
    peer: int
    amount: float
    key: str | None = None


class LedgerService:
    """Serializes every ledger mutation through the owning node."""

    def __init__(self, node: Node, ledger: Ledger):
        self.node = node
        self.ledger = ledger
        node.on(CoinAward, self._on_award)
        node.on(CoinPenalty, self._on_penalty)
        node.on(CoinSpend, self._on_spend)

    def _emit(self, peer: int, balance: Fraction) -> None:
        self.node.sim.metrics.emit(self.node.now, peer, "coin.balance", float(balance))

    def _on_award(self, envelope: Envelope) -> Ack:
        msg: CoinAward = envelope.payload  # type: ignore[assignment]
        balance = self.ledger.award(msg.channel, msg.peer, msg.basis, self.node.now, key=msg.key, dataset=msg.dataset)
        self._emit(msg.peer, balance)
        return Ack()

    def _on_penalty(self, envelope: Envelope) -> Ack:
        msg: CoinPenalty = envelope.payload  # type: ignore[assignment]
        self._emit(msg.peer, self.ledger.penalize(msg.peer, msg.items, self.node.now, key=msg.key))
        return Ack()

    def _on_spend(self, envelope: Envelope) -> Ack | ErrorReply:
        msg: CoinSpend = envelope.payload  # type: ignore[assignment]
        try:
            balance = self.ledger.spend(msg.peer, msg.amount, self.node.now, key=msg.key)
        except InsufficientFundsError as e:
            log.warning(f"spend rejected: {e}")
            return ErrorReply(reason="insufficient funds")
        self._emit(msg.peer, balance)
        return Ack(detail={"balance": float(balance)})
