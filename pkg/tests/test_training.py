import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from pydantic import ValidationError

from hydrasim.training import (
    ChunkLedger,
    LossScaler,
    PrecisionMode,
    ToyModel,
    TrainingError,
    TrainingJobConfig,
    apply_update,
    decompress,
    flatten,
    full_batch_sgd,
    handle_rank_loss,
    initial_params,
    lars_local_lr,
    lars_update,
    local_gradients,
    mixed_precision_step,
    round_half,
    synthetic_dataset,
    topk_compress,
    unflatten,
    unscale_and_update,
    warmup_lr,
)


@pytest.fixture
def config() -> TrainingJobConfig:
    return TrainingJobConfig(global_batch=16, widths=[3, 5, 2], dataset_size=48, dataset_seed=4, global_lr=0.05)


def test_gradients_match_finite_differences(config):
    model = ToyModel.from_config(config)
    params = initial_params(config)
    x, y = synthetic_dataset(config)
    chunk = np.arange(6)
    grads = local_gradients(model, params, x, y, chunk)
    h = 1e-6
    for layer, index in [(0, (1, 2)), (1, (3,)), (2, (4, 0)), (3, (1,))]:
        bumped = [p.copy() for p in params]
        bumped[layer][index] += h
        up, _ = model.loss_and_grads(bumped, x[chunk], y[chunk])
        bumped[layer][index] -= 2 * h
        down, _ = model.loss_and_grads(bumped, x[chunk], y[chunk])
        assert grads.grads[layer][index] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-6)


def test_chunked_gradients_sum_to_the_batch_gradient(config):
    model = ToyModel.from_config(config)
    params = initial_params(config)
    x, y = synthetic_dataset(config)
    batch = np.arange(16)
    whole = local_gradients(model, params, x, y, batch)
    parts = [local_gradients(model, params, x, y, c) for c in np.array_split(batch, [3, 4, 11])]
    total = sum(p.flat() for p in parts)
    np.testing.assert_allclose(total, whole.flat(), rtol=1e-12, atol=1e-12)
    assert sum(p.n for p in parts) == whole.n == 16


def test_distributed_steps_track_the_single_machine_oracle(config):
    model = ToyModel.from_config(config)
    x, y = synthetic_dataset(config)
    ledger = ChunkLedger(config.dataset_size, np.random.default_rng(0))
    weights = initial_params(config)
    batches = []
    for step in range(6):
        chunks = ledger.assign([5, 0, 7, 4])
        batches.append(np.concatenate([c.indices for c in chunks]))
        grads = [local_gradients(model, weights, x, y, c.indices) for c in chunks if len(c)]
        summed = unflatten(sum(g.flat() for g in grads), model.shapes)
        weights = apply_update(weights, summed, sum(g.n for g in grads), config, step)
        for c in chunks:
            ledger.complete(c)
    reference = full_batch_sgd(config, batches)
    for ours, theirs in zip(weights, reference):
        np.testing.assert_allclose(ours, theirs, rtol=1e-10, atol=1e-12)


def test_empty_chunk_is_refused(config):
    model = ToyModel.from_config(config)
    x, y = synthetic_dataset(config)
    with pytest.raises(TrainingError):
        local_gradients(model, initial_params(config), x, y, np.zeros(0, dtype=np.int64))


def test_lars_local_rate_closed_form():
    w, g = np.array([3.0, 4.0]), np.array([0.0, 2.0])
    assert lars_local_lr(w, g, trust=0.01) == pytest.approx(0.01 * 5 / 2)
    assert lars_local_lr(w, g, trust=0.01, decay=0.1) == pytest.approx(0.01 * 5 / (2 + 0.5))
    assert lars_local_lr(np.zeros(2), np.zeros(2), trust=0.01) == 0.0
    assert lars_local_lr(np.array([0.0, 2.0]), np.zeros(2), trust=0.01) == 0.0
    assert lars_local_lr(np.array([0.0, 2.0]), np.zeros(2), trust=0.01, decay=0.5) == pytest.approx(0.02)
    updated = lars_update([w], [g], lr=2.0, trust=0.01)
    np.testing.assert_allclose(updated[0], w - 2.0 * 0.025 * g)


def test_lars_steps_are_scale_free_per_layer():
    w = [np.ones((2, 2)), np.full(2, 3.0)]
    small = lars_update(w, [np.full((2, 2), 1e-4), np.full(2, 1e-4)], lr=1.0, trust=0.1)
    large = lars_update(w, [np.full((2, 2), 1e4), np.full(2, 1e4)], lr=1.0, trust=0.1)
    for a, b in zip(small, large):
        np.testing.assert_allclose(a, b, rtol=1e-6)


def test_warmup_ramps_linearly():
    assert [warmup_lr(1.0, s, 10, fraction=0.5) for s in range(6)] == pytest.approx([0.2, 0.4, 0.6, 0.8, 1.0, 1.0])


def test_loss_scaling_rescues_underflowing_gradients():
    tiny = 2.0**-30
    assert round_half(tiny) == 0.0
    assert round_half(tiny * 2.0**20) == np.float32(2.0**-10)

    config = TrainingJobConfig(global_batch=1, widths=[1, 1], global_lr=1.0, precision=PrecisionMode.MIXED)
    master = [np.zeros((1, 1), dtype=np.float32), np.zeros(1, dtype=np.float32)]
    scaler = LossScaler(2.0**20, dynamic=False)
    scaled = [round_half(np.full((1, 1), tiny * scaler.scale)), round_half(np.zeros(1))]
    updated = unscale_and_update(master, scaled, 1, scaler, config, 0)
    assert updated[0][0, 0] == np.float32(-tiny)

    unscaled = [round_half(np.full((1, 1), tiny)), round_half(np.zeros(1))]
    lost = unscale_and_update(master, unscaled, 1, LossScaler(1.0, dynamic=False), config, 0)
    assert lost[0][0, 0] == 0.0


def test_overflow_skips_the_step_and_halves_the_scale():
    config = TrainingJobConfig(global_batch=1, widths=[1, 1], precision=PrecisionMode.MIXED, loss_scale=1024)
    master = [np.ones((1, 1), dtype=np.float32), np.ones(1, dtype=np.float32)]
    scaler = LossScaler(1024.0)
    out = unscale_and_update(master, [np.full((1, 1), np.inf), np.zeros(1)], 1, scaler, config, 0)
    assert out is master
    assert scaler.scale == 512.0 and scaler.skipped == 1


def test_growth_step_unscales_by_the_scale_that_was_applied():
    config = TrainingJobConfig(global_batch=1, widths=[1, 1], global_lr=1.0, precision=PrecisionMode.MIXED)
    master = [np.zeros((1, 1), dtype=np.float32), np.zeros(1, dtype=np.float32)]
    scaler = LossScaler(4.0, growth_interval=1)
    updated = unscale_and_update(master, [np.full((1, 1), 4.0), np.zeros(1)], 1, scaler, config, 0)
    assert scaler.scale == 8.0
    assert updated[0][0, 0] == np.float32(-1.0)


@pytest.mark.parametrize("use_lars", [False, True])
def test_scaling_is_neutral_in_float64(use_lars):
    config = TrainingJobConfig(
        global_batch=4, widths=[3, 2], global_lr=0.5, use_lars=use_lars, trust=0.1, precision=PrecisionMode.MIXED
    )
    rng = np.random.default_rng(11)
    plain = [rng.normal(size=(3, 2)), rng.normal(size=2)]
    scaled_path = [p.copy() for p in plain]
    scaler = LossScaler(2.0**10, growth_interval=2)
    for step in range(5):
        grads = [rng.normal(size=p.shape) for p in plain]
        applied = scaler.scale
        scaled_path = unscale_and_update(scaled_path, [g * applied for g in grads], 4, scaler, config, step)
        plain = apply_update(plain, grads, 4, config, step)
        for a, b in zip(scaled_path, plain):
            assert a.dtype == np.float64
            np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
    # grew on steps 1 and 3
    assert scaler.scale == 2.0**12


def test_mixed_precision_step_refreshes_the_working_copy(config):
    model = ToyModel.from_config(config)
    master = [p.astype(np.float32) for p in initial_params(config)]
    x, y = synthetic_dataset(config)
    result = mixed_precision_step(model, master, x, y, np.arange(16), LossScaler(1024.0), config)
    assert not result.skipped and math.isfinite(result.loss)
    assert all(p.dtype == np.float32 for p in result.master)
    assert any(not np.array_equal(a, b) for a, b in zip(result.master, master))
    for working, updated in zip(result.working, result.master):
        np.testing.assert_array_equal(working, round_half(updated))


def test_loss_scale_grows_after_clean_steps():
    scaler = LossScaler(8.0, growth_interval=3)
    for _ in range(3):
        assert not scaler.update(False)
    assert scaler.scale == 16.0


vectors = arrays(np.float64, st.integers(min_value=1, max_value=40), elements=st.floats(-1e6, 1e6))


@given(vectors, st.data())
def test_compression_loses_nothing(grad, data):
    k = data.draw(st.integers(min_value=1, max_value=len(grad)))
    residual = data.draw(arrays(np.float64, len(grad), elements=st.floats(-1e6, 1e6)))
    sparse, remainder = topk_compress(grad, k, residual)
    assert len(sparse.indices) == k
    np.testing.assert_array_equal(decompress(sparse) + remainder, grad + residual)


def test_compression_keeps_the_largest_magnitudes():
    sparse, remainder = topk_compress(np.array([0.1, -5.0, 2.0, 0.0]), 2)
    assert sparse.indices.tolist() == [1, 2]
    assert remainder.tolist() == [0.1, 0.0, 0.0, 0.0]
    with pytest.raises(TrainingError):
        topk_compress(np.ones(3), 4)


class TestChunkLedger:
    def test_each_sample_once_per_epoch(self):
        ledger = ChunkLedger(10, np.random.default_rng(1))
        for _ in range(5):
            for chunk in ledger.assign([3, 1]):
                ledger.complete(chunk)
        assert ledger.epoch == 1
        assert ledger.audit() == []
        assert ledger.trained[0].tolist() == [1] * 10

    def test_deferred_chunks_come_first(self):
        ledger = ChunkLedger(12, np.random.default_rng(2))
        kept, lost = ledger.assign([4, 4])
        ledger.complete(kept)
        assert handle_rank_loss(ledger, {"rank:1": lost}, step=0) == 4
        assert ledger.deferred_samples == 4
        retry = ledger.assign([2, 2])
        assert np.concatenate([c.indices for c in retry]).tolist() == lost.indices.tolist()
        for chunk in retry:
            ledger.complete(chunk)
        (last,) = ledger.assign([4])
        ledger.complete(last)
        assert ledger.audit() == []

    def test_double_training_is_reported(self):
        ledger = ChunkLedger(4, np.random.default_rng(3))
        (chunk,) = ledger.assign([2])
        ledger.complete(chunk)
        ledger.complete(chunk)
        assert any("twice" in p for p in ledger.audit())

    def test_negative_sizes_are_refused(self):
        with pytest.raises(TrainingError):
            ChunkLedger(4, np.random.default_rng(0)).assign([1, -1])


class TestTrainingJobConfig:
    def test_loss_scale_must_be_a_power_of_two(self):
        with pytest.raises(ValidationError, match="power of two"):
            TrainingJobConfig(global_batch=4, loss_scale=3.0)

    def test_compression_cannot_exceed_the_parameter_count(self):
        with pytest.raises(ValidationError):
            TrainingJobConfig(global_batch=4, widths=[2, 1], compression_k=4)

    def test_parameter_count(self):
        config = TrainingJobConfig(global_batch=4, widths=[3, 5, 2])
        assert config.parameter_count == 3 * 5 + 5 + 5 * 2 + 2
        assert len(flatten(initial_params(config))) == config.parameter_count
        assert math.isclose(config.global_lr, 0.1)


def test_unflatten_checks_the_length():
    with pytest.raises(TrainingError):
        unflatten(np.zeros(5), [(2, 2)])
