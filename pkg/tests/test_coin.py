from fractions import Fraction

import pandas as pd
import pytest
from hypothesis import given, strategies as st
from pydantic import ValidationError

from hydrasim.coin import (
    CoinAward,
    CoinError,
    CoinRates,
    CoinSpend,
    InsufficientFundsError,
    Ledger,
    RewardKind,
    diversity_multiplier,
    vcu,
)
from hydrasim.models import Ack, ErrorReply
from hydrasim.sim import Process


def test_vcu_is_half_the_samples_at_reference_speed():
    assert vcu(100.0, 100.0, 1) == pytest.approx(0.5)
    assert vcu(100.0, 100.0, 64) == pytest.approx(32.0)
    assert vcu(2_000.0, 1_000.0, 10) > vcu(1_000.0, 1_000.0, 10) > vcu(1_000.0, 2_000.0, 10)
    with pytest.raises(CoinError):
        vcu(0.0, 1.0, 1)


def test_channel_rates():
    ledger = Ledger()
    ledger.award(RewardKind.CONTRIBUTION, 1, 3_000_000)
    ledger.award(RewardKind.SEEDING, 1, 2_000_000)
    ledger.award(RewardKind.VALIDATION, 2, 10)
    ledger.award(RewardKind.ANNOTATION, 2, 10)
    ledger.award(RewardKind.TRAINING_STEP, 3, Fraction(5, 2))
    assert ledger.balance(1) == Fraction(3) + Fraction(1)
    assert ledger.balance(2) == Fraction(1) + Fraction(2)
    assert ledger.balance(3) == Fraction(5, 2)


def test_diversity_bonus_grows_then_caps():
    assert diversity_multiplier(1) == 1
    assert diversity_multiplier(3) == Fraction(11, 10)
    assert diversity_multiplier(50) == Fraction(3, 2)
    ledger = Ledger()
    for dataset in range(3):
        ledger.award(RewardKind.CONTRIBUTION, 7, 1_000_000, dataset=dataset)
    assert [e.multiplier for e in ledger.events] == [1, Fraction(21, 20), Fraction(11, 10)]
    flat = Ledger(CoinRates(diversity_bonus=False))
    for dataset in range(3):
        flat.award(RewardKind.CONTRIBUTION, 7, 1_000_000, dataset=dataset)
    assert flat.balance(7) == 3


def test_penalty_floors_at_zero_and_records_the_shortfall():
    ledger = Ledger()
    ledger.award(RewardKind.ANNOTATION, 4, 5)
    assert ledger.penalize(4, 10) == 0
    event = ledger.events[-1]
    assert event.amount == -1 and event.shortfall == 4
    assert ledger.audit() == []


def test_spend_needs_funds():
    ledger = Ledger()
    ledger.award(RewardKind.GRANT, 9, 10)
    assert ledger.spend(9, 4) == 6
    with pytest.raises(InsufficientFundsError) as e:
        ledger.spend(9, 7)
    assert e.value.balance == 6 and e.value.amount == 7
    with pytest.raises(CoinError):
        ledger.spend(9, 0)
    with pytest.raises(CoinError):
        ledger.award(RewardKind.SPEND, 9, 1)


def test_keyed_events_apply_once():
    ledger = Ledger()
    ledger.award(RewardKind.GRANT, 1, 5, key="grant:1")
    ledger.award(RewardKind.GRANT, 1, 5, key="grant:1")
    ledger.spend(1, 2, key="job:a")
    ledger.spend(1, 2, key="job:a")
    assert ledger.balance(1) == 3
    assert len(ledger.events) == 2


def test_rates_refuse_nan_and_negatives():
    with pytest.raises(ValidationError):
        CoinRates(contribution_per_mb=float("nan"))
    with pytest.raises(ValidationError):
        CoinRates(seeding_per_mb=-1)


operations = st.lists(
    st.tuples(
        st.sampled_from(["award", "penalize", "spend"]),
        st.sampled_from([k for k in RewardKind if k not in (RewardKind.PENALTY, RewardKind.SPEND)]),
        st.integers(min_value=0, max_value=5),
        st.integers(min_value=1, max_value=3_000_000),
    ),
    max_size=60,
)


@given(operations)
def test_replay_reproduces_every_balance(ops):
    ledger = Ledger()
    for op, kind, peer, amount in ops:
        if op == "award":
            ledger.award(kind, peer, amount)
        elif op == "penalize":
            ledger.penalize(peer, amount % 20)
        else:
            try:
                ledger.spend(peer, amount % 50 + 1)
            except InsufficientFundsError:
                pass
    assert ledger.audit() == []
    assert ledger.replay() == {p: b for p, b in ledger.balances.items()}
    assert all(b >= 0 for b in ledger.balances.values())


def test_export_csv(tmp_path):
    ledger = Ledger()
    ledger.award(RewardKind.GRANT, 1, 10, key="grant:1")
    ledger.penalize(1, 2)
    path = ledger.export_csv(tmp_path / "out" / "ledger.csv")
    frame = pd.read_csv(path)
    assert frame["kind"].tolist() == ["grant", "penalty"]
    assert frame["amount"].tolist() == [10.0, -1.0]


def test_ledger_service_round_trip(small_network):
    network = small_network(3)
    peer = network.peer(2)
    ledger_address = network.primary.address

    def pay() -> Process:
        yield peer.node.request(ledger_address, CoinAward(channel=RewardKind.GRANT, peer=2, basis=5, key="g"))
        ok = yield peer.node.request(ledger_address, CoinSpend(peer=2, amount=3.0, key="s"))
        refused = yield peer.node.request(ledger_address, CoinSpend(peer=2, amount=3.0, key="s2"))
        return ok, refused

    ok, refused = network.sim.execute(peer.node, pay())
    assert isinstance(ok, Ack) and ok.detail == {"balance": 2.0}
    assert refused == ErrorReply(reason="insufficient funds")
    balances = [r.value for r in network.sim.metrics.select("coin.balance") if r.node == 2]
    assert balances == [5.0, 2.0]
