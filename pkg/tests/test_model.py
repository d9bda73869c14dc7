import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedchain.data import synth_dataset
from fedchain.errors import CacheError, EmptyDataset, InvalidArchitecture, LabelError, ShapeError
from fedchain.model import (AdamState, DenseLayer, ModelWeights, TrainConfig, adam_step, backward,
                            evaluate_accuracy, forward, init_model, loss_sparse_ce, train_local,
                            train_local_with_history)


def _numeric_grad(model, x, y, h=1e-5):
    """Central differences of the loss, one parameter at a time."""
    grads = []
    for layer in model.layers:
        for arr in (layer.weight, layer.bias):
            g = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                orig = arr[idx]
                arr[idx] = orig + h
                up = loss_sparse_ce(forward(model, x)[0], y)
                arr[idx] = orig - h
                down = loss_sparse_ce(forward(model, x)[0], y)
                arr[idx] = orig
                g[idx] = (up - down) / (2 * h)
            grads.append(g)
    return grads


def max_relative_error(model, x, y):
    probs, cache = forward(model, x)
    analytic = list(backward(model, cache, y).arrays())
    numeric = _numeric_grad(model, x, y)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.abs(a) + np.abs(n), 1e-7)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


# init_model

def test_init_full_size_architecture_shapes():
    model = init_model([784, 1024, 512, 128, 10], seed=0)
    assert model.layer_count == 4
    assert model.shapes() == [(784, 1024), (1024, 512), (512, 128), (128, 10)]


def test_init_deterministic():
    assert init_model([2, 2], 5).bit_equal(init_model([2, 2], 5))
    assert not init_model([2, 2], 5).bit_equal(init_model([2, 2], 6))


def test_init_shape_chain_and_bound():
    model = init_model([4, 3, 2], 0)
    assert model.shapes() == [(4, 3), (3, 2)]
    assert [l.bias.shape[0] for l in model.layers] == [3, 2]
    assert np.all(np.abs(model.layers[0].weight) <= math.sqrt(6 / 4))


@pytest.mark.parametrize("dims", [[], [5], [3, 0, 2], [2.5, 2]])
def test_init_rejects_degenerate(dims):
    with pytest.raises(InvalidArchitecture):
        init_model(dims, 0)


def test_model_weights_rejects_broken_chain():
    with pytest.raises(ShapeError):
        ModelWeights([DenseLayer(np.zeros((3, 2)), np.zeros(2)), DenseLayer(np.zeros((3, 1)), np.zeros(1))])


# forward / loss

@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    model = init_model([5, 4, 10], 3)
    probs, _ = forward(model, x)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9, rtol=0)
    assert np.all((probs >= 0) & (probs <= 1))


def test_zero_model_gives_uniform_probs():
    model = ModelWeights.from_arrays([(np.zeros((3, 4)), np.zeros(4)), (np.zeros((4, 10)), np.zeros(10))])
    probs, _ = forward(model, np.ones((7, 3)))
    assert probs.shape == (7, 10)
    assert np.allclose(probs, 0.1, atol=1e-15)


def test_forward_shape_mismatch():
    with pytest.raises(ShapeError):
        forward(init_model([4, 2], 0), np.ones((2, 5)))


def test_loss_closed_forms():
    assert loss_sparse_ce(np.full((3, 10), 0.1), [0, 4, 9]) == pytest.approx(math.log(10), abs=1e-12)
    assert loss_sparse_ce(np.eye(3), [0, 1, 2]) == 0.0
    assert loss_sparse_ce(np.array([[0.5, 0.5]]), [0]) == pytest.approx(0.693147, abs=1e-6)


def test_loss_rejects_bad_labels():
    with pytest.raises(LabelError):
        loss_sparse_ce(np.full((1, 3), 1 / 3), [3])
    with pytest.raises(LabelError):
        loss_sparse_ce(np.full((2, 3), 1 / 3), [0])


# backward

@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    model = init_model([4, 3, 2], seed)
    for layer in model.layers:
        layer.bias[:] = rng.normal(scale=0.5, size=layer.bias.shape)
    x = rng.normal(size=(8, 4))
    y = rng.integers(0, 2, size=8)
    assert max_relative_error(model, x, y) < 1e-4


def test_saturated_batch_has_vanishing_gradient():
    # identity-ish net with huge logits on the true class
    w1 = np.eye(3) * 100.0
    w2 = np.eye(3) * 100.0
    model = ModelWeights.from_arrays([(w1, np.zeros(3)), (w2, np.zeros(3))])
    x = np.eye(3)
    _, cache = forward(model, x)
    grads = backward(model, cache, [0, 1, 2])
    assert np.linalg.norm(grads.flatten()) < 1e-6


def test_duplicated_batch_keeps_mean_gradient(rng):
    model = init_model([4, 5, 3], 1)
    x = rng.normal(size=(6, 4))
    y = rng.integers(0, 3, size=6)
    g1 = backward(model, forward(model, x)[1], y).flatten()
    g2 = backward(model, forward(model, np.vstack([x, x]))[1], np.concatenate([y, y])).flatten()
    assert np.max(np.abs(g1 - g2)) < 1e-12


def test_backward_rejects_foreign_cache(rng):
    a, b = init_model([3, 2], 0), init_model([3, 2], 1)
    _, cache = forward(a, rng.normal(size=(2, 3)))
    with pytest.raises(CacheError):
        backward(b, cache, [0, 1])


# adam

def _scalar_model(value):
    return ModelWeights.from_arrays([(np.array([[value]]), np.array([0.0]))])


def test_adam_zero_gradient_is_noop():
    model = init_model([3, 2], 0)
    zero = ModelWeights.from_arrays([(np.zeros((3, 2)), np.zeros(2))])
    new, state = adam_step(model, zero, AdamState.zeros_like(model), TrainConfig())
    assert new.bit_equal(model)
    assert state.t == 1


def test_adam_first_step_closed_form():
    cfg = TrainConfig(learning_rate=0.001)
    model = _scalar_model(0.5)
    grad = ModelWeights.from_arrays([(np.array([[1.0]]), np.array([0.0]))])
    new, _ = adam_step(model, grad, AdamState.zeros_like(model), cfg)
    # bias-corrected moments equal g and g^2 on the first step
    expected = -0.001 * 1.0 / (math.sqrt(1.0) + 1e-8)
    assert new.layers[0].weight[0, 0] - 0.5 == pytest.approx(expected, abs=1e-15)


def test_adam_deterministic(rng):
    model = init_model([3, 2], 0)
    grad = ModelWeights.from_arrays([(rng.normal(size=(3, 2)), rng.normal(size=2))])
    state = AdamState.zeros_like(model)
    a, sa = adam_step(model, grad, state, TrainConfig())
    b, sb = adam_step(model, grad, state, TrainConfig())
    assert a.bit_equal(b) and sa.t == sb.t


def test_adam_shape_mismatch():
    model = init_model([3, 2], 0)
    with pytest.raises(ShapeError):
        adam_step(model, init_model([2, 2], 0), AdamState.zeros_like(model), TrainConfig())


@pytest.mark.parametrize("kwargs", [dict(adam_beta1=1.0), dict(adam_beta2=0.0), dict(adam_epsilon=0.0),
                                    dict(learning_rate=-1.0)])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# train_local / evaluate

def test_zero_epochs_returns_identical_weights():
    ds = synth_dataset(50, 10, 20, 0)
    model = init_model([20, 8, 10], 0)
    assert train_local(model, ds, TrainConfig(epochs=0)).bit_equal(model)


def test_training_improves_accuracy_and_leaves_input_untouched():
    ds = synth_dataset(200, 10, 20, 4)
    model = init_model([20, 16, 10], 4)
    before = model.copy()
    trained = train_local(model, ds, TrainConfig(rng_seed=4))
    assert model.bit_equal(before)
    assert evaluate_accuracy(trained, ds) > evaluate_accuracy(model, ds)


def test_training_is_bit_reproducible():
    ds = synth_dataset(120, 10, 20, 1)
    model = init_model([20, 8, 10], 1)
    a = train_local(model, ds, TrainConfig(rng_seed=9))
    b = train_local(model, ds, TrainConfig(rng_seed=9))
    assert a.bit_equal(b)


def test_empty_dataset_rejected():
    with pytest.raises(EmptyDataset):
        train_local(init_model([3, 2], 0), (np.zeros((0, 3)), np.zeros(0, dtype=int)), TrainConfig())
    with pytest.raises(EmptyDataset):
        evaluate_accuracy(init_model([3, 2], 0), (np.zeros((0, 3)), np.zeros(0, dtype=int)))


def test_epoch_loss_mostly_non_increasing():
    ds = synth_dataset(300, 10, 20, 0)
    monotone = 0
    for seed in range(5):
        _, history = train_local_with_history(init_model([20, 16, 10], seed), ds,
                                              TrainConfig(rng_seed=seed))
        monotone += all(b <= a for a, b in zip(history, history[1:]))
    assert monotone >= 4


def test_uniform_predictions_break_ties_low():
    model = ModelWeights.from_arrays([(np.zeros((3, 10)), np.zeros(10))])
    assert evaluate_accuracy(model, (np.ones((5, 3)), np.zeros(5, dtype=int))) == 1.0


def test_accuracy_one_when_labels_are_predictions(rng):
    model = init_model([5, 7, 10], 2)
    x = rng.normal(size=(40, 5))
    labels = np.argmax(forward(model, x)[0], axis=1)
    assert evaluate_accuracy(model, (x, labels)) == 1.0


def test_untrained_model_is_near_chance():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=(1000, 20))
        y = rng.integers(0, 10, size=1000)
        assert 0.05 <= evaluate_accuracy(init_model([20, 16, 10], seed), (x, y)) <= 0.2
