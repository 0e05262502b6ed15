"""MoE kernel: forward/backward math, chunking and the activation meter."""
import logging

import numpy as np
import pytest

from src.core.errors import MeterError, MissingActivationsError, NumericalHealthError, PartitionError
from src.core.moe_kernel import (
    ActivationMeter,
    ChunkPartition,
    ExpertWeights,
    TokenBatch,
    backward,
    backward_chunked,
    forward,
    forward_chunked,
    load_fixture,
    random_instance,
    save_fixture,
)


def _eye_experts(scales, hidden=2):
    eye = np.eye(hidden)
    w = np.stack([eye] * len(scales))
    return ExpertWeights(w.copy(), w.copy(), np.stack([s * eye for s in scales]))


@pytest.fixture
def instance(rng):
    return random_instance(rng, tokens=24, hidden=6, intermediate=10, experts=5, topk=3)


# -- forward math ---------------------------------------------------------------

def test_identity_expert_returns_input():
    x = np.array([[1.5, -2.0], [0.25, 4.0], [3.0, 0.0]])
    batch = TokenBatch(x, np.zeros((3, 1), dtype=np.int64), np.ones((3, 1)))
    y = forward(batch, _eye_experts([1.0]), activation="unit", save=False).output
    assert np.array_equal(y, x)


def test_two_tokens_two_experts_by_hand():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    batch = TokenBatch(x, np.array([[0], [1]]), np.array([[0.5], [1.0]]))
    y = forward(batch, _eye_experts([2.0, 3.0]), activation="unit", save=False).output
    assert np.array_equal(y, np.array([[1.0, 2.0], [9.0, 12.0]]))


def test_top2_combine_weights_both_experts():
    x = np.array([[1.0, -1.0]])
    batch = TokenBatch(x, np.array([[1, 0]]), np.array([[0.25, 0.75]]))
    y = forward(batch, _eye_experts([2.0, 4.0]), activation="unit", save=False).output
    assert np.array_equal(y, np.array([[2.5, -2.5]]))


def test_zero_scores_give_zero_output(instance):
    batch, weights = instance
    silent = TokenBatch(batch.data, batch.expert_ids, np.zeros_like(batch.scores))
    result = forward(silent, weights)
    assert not result.output.any()
    grads = backward(np.ones_like(batch.data), silent, weights, result.saved)
    assert not grads.x.any()
    assert not grads.w_down.any()


def test_zero_output_grad_gives_zero_grads(instance):
    batch, weights = instance
    saved = forward(batch, weights).saved
    grads = backward(np.zeros_like(batch.data), batch, weights, saved)
    for name in ("x", "w_gate", "w_up", "w_down", "scores"):
        assert not getattr(grads, name).any()


def test_dispatch_moves_every_copy_once(instance):
    batch, weights = instance
    saved = forward(batch, weights).saved
    assert np.array_equal(np.sort(saved.order), np.arange(batch.num_tokens * batch.topk))
    assert np.all(np.diff(saved.expert_sorted) >= 0)


def test_relu_activation(instance):
    batch, weights = instance
    y = forward(batch, weights, activation="relu", save=False).output
    assert y.shape == batch.data.shape


# -- partitions ----------------------------------------------------------------

def test_even_partition_puts_larger_chunks_first():
    assert ChunkPartition.even(10, 3).boundaries == ((0, 4), (4, 7), (7, 10))
    assert ChunkPartition.even(8, 1).boundaries == ((0, 8),)


def test_more_chunks_than_tokens_leaves_empty_chunks():
    part = ChunkPartition.even(2, 4)
    assert part.boundaries == ((0, 1), (1, 2), (2, 2), (2, 2))
    assert part.num_tokens == 2


@pytest.mark.parametrize("bounds", [(), ((0, 3), (4, 5)), ((1, 3),), ((0, 3), (3, 2))])
def test_broken_partitions(bounds):
    with pytest.raises(PartitionError):
        ChunkPartition(bounds)


def test_zero_chunks_rejected():
    with pytest.raises(PartitionError):
        ChunkPartition.even(5, 0)


# -- chunked equivalence ---------------------------------------------------------

@pytest.mark.parametrize("chunks", [1, 2, 3, 5, 8, 30])
def test_chunked_forward_is_bit_identical(instance, chunks):
    batch, weights = instance
    reference = forward(batch, weights, save=False).output
    chunked = forward_chunked(batch, weights, ChunkPartition.even(batch.num_tokens, chunks))
    assert np.array_equal(chunked, reference)


def test_chunked_passes_log_their_split(instance, caplog):
    batch, weights = instance
    partition = ChunkPartition.even(batch.num_tokens, 4)
    with caplog.at_level(logging.DEBUG, logger="src.core.moe_kernel"):
        y = forward_chunked(batch, weights, partition)
        backward_chunked(np.ones_like(y), batch, weights, partition)
    messages = [r.getMessage() for r in caplog.records]
    assert "chunked forward: 24 tokens in 4 chunks" in messages
    assert "chunked backward: 24 tokens in 4 chunks" in messages


@pytest.mark.parametrize("chunks", [1, 4, 7])
def test_chunked_backward_matches(instance, rng, chunks):
    batch, weights = instance
    y_grad = rng.standard_normal(batch.data.shape)
    reference = backward(y_grad, batch, weights, forward(batch, weights).saved)
    grads = backward_chunked(y_grad, batch, weights, ChunkPartition.even(batch.num_tokens, chunks))
    assert np.array_equal(grads.x, reference.x)
    assert np.array_equal(grads.scores, reference.scores)
    for name in ("w_gate", "w_up", "w_down"):
        np.testing.assert_allclose(getattr(grads, name), getattr(reference, name), rtol=1e-12, atol=1e-14)


def test_uneven_custom_partition(instance):
    batch, weights = instance
    part = ChunkPartition(((0, 1), (1, 1), (1, 20), (20, 24)))
    assert np.array_equal(forward_chunked(batch, weights, part), forward(batch, weights, save=False).output)


def test_partition_must_cover_batch(instance):
    batch, weights = instance
    with pytest.raises(PartitionError):
        forward_chunked(batch, weights, ChunkPartition.even(batch.num_tokens - 1, 2))
    with pytest.raises(PartitionError):
        backward_chunked(np.ones_like(batch.data), batch, weights, ChunkPartition.even(10, 2))


# -- input errors --------------------------------------------------------------

def test_backward_needs_saved_activations(instance):
    batch, weights = instance
    with pytest.raises(MissingActivationsError):
        backward(np.ones_like(batch.data), batch, weights, None)
    assert forward(batch, weights, save=False).saved is None


def test_saved_activations_are_used_once(instance):
    batch, weights = instance
    saved = forward(batch, weights).saved
    backward(np.ones_like(batch.data), batch, weights, saved)
    with pytest.raises(MissingActivationsError):
        backward(np.ones_like(batch.data), batch, weights, saved)


def test_shape_and_id_checks(instance):
    batch, weights = instance
    with pytest.raises(ValueError):
        forward(TokenBatch(batch.data, batch.expert_ids + 5, batch.scores), weights)
    with pytest.raises(ValueError):
        forward(TokenBatch(batch.data[:, :4], batch.expert_ids, batch.scores), weights)
    with pytest.raises(ValueError):
        TokenBatch(batch.data, batch.expert_ids, batch.scores[:, :2])
    with pytest.raises(ValueError):
        forward(batch, weights, activation="gelu")


def test_non_finite_output_is_reported(instance):
    batch, weights = instance
    data = batch.data.copy()
    data[0, :] = np.inf
    with pytest.raises(NumericalHealthError):
        forward(TokenBatch(data, batch.expert_ids, batch.scores), weights, activation="unit")


# -- meter --------------------------------------------------------------------

def test_single_chunk_ledger_matches_unchunked(instance):
    batch, weights = instance
    plain, chunked = ActivationMeter(), ActivationMeter()
    forward(batch, weights, plain, save=False)
    forward_chunked(batch, weights, ChunkPartition.even(batch.num_tokens, 1), chunked)
    assert plain.allocations() == chunked.allocations()
    assert [t for t, _ in plain.allocations()] == [
        "input", "output", "expert_input", "expert_intermediate", "expert_output",
    ]
    assert plain.current_bytes == plain.resident_bytes == 2 * 24 * 6 * 8


def test_meter_uses_configured_element_size(instance):
    batch, weights = instance
    meter = ActivationMeter(element_bytes=2)
    forward(batch, weights, meter, save=False)
    copies = batch.num_tokens * batch.topk
    assert dict(meter.allocations())["expert_intermediate"] == 2 * copies * 10 * 2
    assert meter.peak_token_bytes == copies * (2 * 6 + 2 * 10) * 2


def test_chunk_rows_are_tagged(instance):
    batch, weights = instance
    meter = ActivationMeter()
    forward_chunked(batch, weights, ChunkPartition.even(batch.num_tokens, 3), meter)
    tags = [t for t, _ in meter.allocations()]
    assert "expert_input[2]" in tags
    assert meter.current_bytes == meter.resident_bytes


def test_meter_refuses_negative_balance():
    meter = ActivationMeter()
    meter.allocate("a", 10)
    with pytest.raises(MeterError):
        meter.release("a", 11)
    meter.release("a", 10)
    assert meter.current_bytes == 0
    assert meter.peak_bytes == 10
    assert meter.to_records()[-1]["current"] == 0


def test_chunking_divides_token_peak():
    rng = np.random.default_rng(0)
    tokens, hidden, inter, topk = 64, 16, 32, 4
    ids = (np.arange(tokens)[:, None] + np.arange(topk)[None, :]) % 8
    batch = TokenBatch(rng.standard_normal((tokens, hidden)), ids, np.full((tokens, topk), 0.25))
    weights = ExpertWeights.random(rng, 8, hidden, inter)

    full = ActivationMeter()
    saved = forward(batch, weights, full).saved
    backward(np.ones_like(batch.data), batch, weights, saved, full)
    assert full.peak_token_bytes == tokens * topk * (2 * hidden + 2 * inter) * 8

    for chunks in (2, 8):
        meter = ActivationMeter()
        part = ChunkPartition.even(tokens, chunks)
        forward_chunked(batch, weights, part, meter)
        backward_chunked(np.ones_like(batch.data), batch, weights, part, meter)
        assert meter.peak_token_bytes * chunks == full.peak_token_bytes


# -- fixtures ----------------------------------------------------------------

def test_fixture_round_trip(tmp_path, instance):
    batch, weights = instance
    path = save_fixture(tmp_path / "case.json", batch, weights, activation="relu")
    loaded_batch, loaded_weights, activation = load_fixture(path)
    assert activation == "relu"
    assert np.array_equal(loaded_batch.expert_ids, batch.expert_ids)
    assert np.array_equal(
        forward(loaded_batch, loaded_weights, activation=activation, save=False).output,
        forward(batch, weights, activation="relu", save=False).output,
    )


def test_fixture_format_checked(tmp_path):
    path = tmp_path / "other.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        load_fixture(path)
