import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_model
from mesasfl.data import ClientDataset, gen_synthetic
from mesasfl.model import (
    LayeredModel,
    MlpArchitecture,
    SchemaError,
    TrainHyperparams,
    backward,
    forward_loss,
    loss_and_grad,
    predict,
    train_local,
)


def reference_loss(model, x, y):
    """Per-sample loop with scalar math, written independently of the vectorized path."""
    blocks = model.layers()
    total = 0.0
    for row, label in zip(x, y):
        h = list(row)
        for k in range(0, len(blocks), 2):
            W, b = blocks[k][1], blocks[k + 1][1]
            z = [sum(h[i] * W[i, j] for i in range(W.shape[0])) + b[j] for j in range(W.shape[1])]
            h = z if k == len(blocks) - 2 else [max(v, 0.0) for v in z]
        top = max(h)
        log_norm = top + math.log(sum(math.exp(v - top) for v in h))
        total += log_norm - h[label]
    return total / len(y)


def test_uniform_logits_give_log_class_count():
    arch = MlpArchitecture(3, (2,), 4)
    zero = arch.init(0).unflatten(np.zeros(arch.init(0).flat_len))
    loss, probs = forward_loss(zero, np.ones((5, 3)), np.array([0, 1, 2, 3, 0]))
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    np.testing.assert_allclose(probs, 0.25)


def test_loss_matches_scalar_reference(rng):
    for _ in range(20):
        model = random_model(rng, (4, 5, 3, 3))
        x = rng.normal(size=(7, 4))
        y = rng.integers(0, 3, size=7)
        loss, probs = forward_loss(model, x, y)
        assert loss == pytest.approx(reference_loss(model, x, y), rel=1e-9, abs=1e-12)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert loss >= 0


def central_difference(model, x, y, h=1e-5):
    flat = model.flatten().copy()
    out = np.empty_like(flat)
    for i in range(flat.size):
        up, down = flat.copy(), flat.copy()
        up[i] += h
        down[i] -= h
        out[i] = (loss_and_grad(up, model.schema, x, y)[0] - loss_and_grad(down, model.schema, x, y)[0]) / (2 * h)
    return out


def gradient_check_pairs(count, seed=2024):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        dims = (int(rng.integers(2, 6)), int(rng.integers(2, 6)), int(rng.integers(2, 5)), int(rng.integers(2, 5)))
        model = random_model(rng, dims)
        n = int(rng.integers(1, 6))
        yield model, rng.normal(size=(n, dims[0])), rng.integers(0, dims[-1], size=n)


def max_relative_gradient_error(model, x, y):
    analytic = backward(model, x, y).flatten()
    numeric = central_difference(model, x, y)
    # differences of ~1e-11 are finite-difference round-off (eps * loss / h);
    # the floor keeps near-zero coordinates from amplifying it
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float(np.max(np.abs(analytic - numeric) / scale))


def test_gradient_matches_finite_differences():
    worst = max(max_relative_gradient_error(*pair) for pair in gradient_check_pairs(100))
    assert worst < 1e-4


def test_gradient_has_model_schema(rng):
    model = random_model(rng)
    grad = backward(model, rng.normal(size=(3, 5)), np.array([0, 1, 2]))
    assert grad.schema == model.schema


def test_duplicated_batch_gives_same_gradient(rng):
    model = random_model(rng)
    x = rng.normal(size=(4, 5))
    y = np.array([0, 2, 1, 1])
    g1 = backward(model, x, y).flatten()
    g2 = backward(model, np.vstack([x, x]), np.concatenate([y, y])).flatten()
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_empty_batch_rejected(rng):
    model = random_model(rng)
    with pytest.raises(ValueError):
        backward(model, np.zeros((0, 5)), np.zeros(0, dtype=int))


@pytest.mark.parametrize("x, y", [(np.zeros((2, 4)), [0, 1]), (np.zeros((2, 5)), [0, 3]), (np.zeros((2, 5)), [0])])
def test_bad_batches_raise_schema_error(rng, x, y):
    with pytest.raises(SchemaError):
        forward_loss(random_model(rng), x, np.asarray(y))


def test_epochs_zero_rejected_and_zero_lr_is_identity(small_arch, blobs):
    with pytest.raises(ValueError):
        TrainHyperparams(epochs=0)
    init = small_arch.init(1)
    assert train_local(init, blobs, TrainHyperparams(learning_rate=0.0, epochs=1)) == init


def test_training_reduces_loss_on_separable_blobs():
    data = gen_synthetic(2, 4, 50, 0.2, rng_seed=3)
    arch = MlpArchitecture(4, (6,), 2)
    init = arch.init(0)
    trained = train_local(init, data, TrainHyperparams(epochs=10, batch_size=16))
    assert forward_loss(trained, data.features, data.labels)[0] <= forward_loss(init, data.features, data.labels)[0]
    assert np.mean(predict(trained, data.features) == data.labels) > 0.95


def test_training_is_deterministic(small_arch, blobs):
    hp = TrainHyperparams(epochs=2, rng_seed=9)
    a = train_local(small_arch.init(4), blobs, hp)
    b = train_local(small_arch.init(4), blobs, hp)
    assert np.array_equal(a.flatten(), b.flatten())
    c = train_local(small_arch.init(4), blobs, hp.with_seed(10))
    assert not np.array_equal(a.flatten(), c.flatten())


def test_empty_dataset_rejected(small_arch):
    empty = ClientDataset(np.zeros((0, 6)), np.zeros(0, dtype=int), 4)
    with pytest.raises(ValueError):
        train_local(small_arch.init(0), empty, TrainHyperparams())


def test_extra_loss_sees_task_terms(small_arch, blobs):
    calls = []

    def spy(params, loss, grad):
        calls.append((params.shape, loss))
        return loss, grad

    hp = TrainHyperparams(epochs=1, batch_size=80)
    plain = train_local(small_arch.init(0), blobs, hp)
    spied = train_local(small_arch.init(0), blobs, hp, extra_loss=spy)
    assert len(calls) == 2 and plain == spied


def test_glorot_init_bounds():
    arch = MlpArchitecture(10, (20, 5), 3)
    model = arch.init(0)
    assert model.names == ["W1", "b1", "W2", "b2", "W3", "b3"]
    for name, values in model.layers():
        if name.startswith("W"):
            limit = math.sqrt(6.0 / sum(values.shape))
            assert np.all(np.abs(values) <= limit)
        else:
            assert not values.any()


def test_model_arithmetic_and_schema(rng):
    a, b = random_model(rng), random_model(rng)
    np.testing.assert_array_equal((a + b).flatten(), a.flatten() + b.flatten())
    np.testing.assert_array_equal((a - b).flatten(), a.flatten() - b.flatten())
    np.testing.assert_array_equal((2 * a).flatten(), 2 * a.flatten())
    assert -(-a) == a
    other = random_model(rng, (5, 3, 3))
    with pytest.raises(SchemaError):
        a + other
    with pytest.raises(SchemaError):
        LayeredModel([("x", np.zeros(2)), ("x", np.zeros(3))])
    with pytest.raises(SchemaError):
        a.unflatten(np.zeros(a.flat_len + 1))


def test_models_are_immutable(rng):
    model = random_model(rng)
    with pytest.raises(ValueError):
        model.flatten()[0] = 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4), st.integers(0, 2**32 - 1))
def test_flatten_unflatten_roundtrip(shapes, seed):
    rng = np.random.default_rng(seed)
    model = LayeredModel([(f"L{i}", rng.normal(size=s)) for i, s in enumerate(shapes)])
    assert model.flat_len == sum(a * b for a, b in shapes)
    assert model.unflatten(model.flatten()) == model
    stops = [spec.offset for spec in model.schema] + [model.flat_len]
    assert stops[0] == 0 and all(x < y for x, y in zip(stops, stops[1:]))
    for name, values in model.layers():
        np.testing.assert_array_equal(model.flatten()[model.layer_slice(name)], values.ravel())
