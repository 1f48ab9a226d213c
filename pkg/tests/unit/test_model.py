import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from taskfed.exceptions import DimensionMismatch, InvalidConfig, LengthMismatch, RankOutOfRange, StaleCache
from taskfed.model import (
    ModelSpec,
    backward,
    build_model,
    forward_loss,
    load_checkpoint,
    load_trainable,
    save_checkpoint,
    sgd_step,
    trainable_vector,
)


def make_batch(spec, n=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, spec.layer_dims[0]))
    if spec.head == "mse":
        y = rng.normal(size=(n, spec.layer_dims[-1]))
    else:
        y = rng.integers(0, spec.layer_dims[-1], size=n).astype(float)
    return X, y


def numeric_gradient(model, X, y, eps=1e-5):
    theta = trainable_vector(model)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        bumped = theta.copy()
        bumped[i] += eps
        load_trainable(model, bumped)
        up, _ = forward_loss(model, X, y)
        bumped[i] -= 2 * eps
        load_trainable(model, bumped)
        down, _ = forward_loss(model, X, y)
        grad[i] = (up - down) / (2 * eps)
    load_trainable(model, theta)
    return grad


def test_spec_counts():
    spec = ModelSpec(layer_dims=(8, 6, 4), rank=2)
    assert spec.max_rank == 4
    assert spec.trainable_count == (6 * 2 + 2 * 8) + (4 * 2 + 2 * 6)
    assert spec.frozen_count == 6 * 8 + 4 * 6
    model = build_model(spec, base_seed=0, adapter_seed=1)
    assert model.trainable_count == spec.trainable_count
    assert model.frozen_count == spec.frozen_count


@pytest.mark.parametrize(
    "kwargs, error",
    [
        ({"layer_dims": (4, 3), "rank": 4}, RankOutOfRange),
        ({"layer_dims": (4, 3), "rank": 0}, RankOutOfRange),
        ({"layer_dims": (4,), "rank": 1}, InvalidConfig),
        ({"layer_dims": (4, 3), "rank": 1, "activation": "gelu"}, InvalidConfig),
        ({"layer_dims": (4, 3), "rank": 1, "head": "hinge"}, InvalidConfig),
    ],
)
def test_invalid_spec(kwargs, error):
    with pytest.raises(error):
        ModelSpec(**kwargs)


def test_same_seeds_same_model():
    spec = ModelSpec(layer_dims=(5, 4, 3), rank=2)
    a = build_model(spec, base_seed=3, adapter_seed=4)
    b = build_model(spec, base_seed=3, adapter_seed=4)
    for la, lb in zip(a.layers, b.layers):
        assert_array_equal(la.base, lb.base)
        assert_array_equal(la.b_factor, lb.b_factor)
    c = build_model(spec, base_seed=3, adapter_seed=5)
    assert_array_equal(a.layers[0].base, c.layers[0].base)
    assert not np.array_equal(a.layers[0].b_factor, c.layers[0].b_factor)


@pytest.mark.parametrize("head", ["mse", "softmax_xent"])
@pytest.mark.parametrize("activation", ["tanh", "relu"])
def test_backward_matches_finite_differences(head, activation):
    spec = ModelSpec(layer_dims=(5, 6, 4), rank=2, activation=activation, head=head)
    model = build_model(spec, base_seed=1, adapter_seed=2)
    rng = np.random.default_rng(3)
    load_trainable(model, rng.normal(0.0, 0.5, size=model.trainable_count))
    X, y = make_batch(spec, seed=4)

    _, cache = forward_loss(model, X, y)
    analytic = backward(model, cache)
    assert_allclose(analytic, numeric_gradient(model, X, y), rtol=1e-6, atol=1e-8)


def test_single_layer_scalar_regression_accepts_flat_targets():
    spec = ModelSpec(layer_dims=(3, 1), rank=1)
    model = build_model(spec, base_seed=0, adapter_seed=0)
    X = np.ones((2, 3))
    flat, _ = forward_loss(model, X, np.array([1.0, 2.0]))
    column, _ = forward_loss(model, X, np.array([[1.0], [2.0]]))
    assert flat == column


def test_mse_loss_value():
    spec = ModelSpec(layer_dims=(2, 2), rank=1)
    model = build_model(spec, base_seed=0, adapter_seed=0)
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    prediction = (model.layers[0].base @ X.T).T
    loss, _ = forward_loss(model, X, prediction + 1.0)
    # residual 1 in each of 2 outputs, halved, mean over 2 samples
    assert loss == pytest.approx(1.0)


def test_softmax_loss_of_uniform_logits():
    spec = ModelSpec(layer_dims=(3, 4), rank=1, head="softmax_xent")
    model = build_model(spec, base_seed=0, adapter_seed=0)
    loss, _ = forward_loss(model, np.zeros((5, 3)), np.zeros(5))
    assert loss == pytest.approx(np.log(4))


def test_bad_labels_and_shapes():
    spec = ModelSpec(layer_dims=(3, 4), rank=1, head="softmax_xent")
    model = build_model(spec, base_seed=0, adapter_seed=0)
    with pytest.raises(DimensionMismatch):
        forward_loss(model, np.zeros((2, 3)), np.array([0.5, 1.0]))
    with pytest.raises(DimensionMismatch):
        forward_loss(model, np.zeros((2, 3)), np.array([0.0, 4.0]))
    with pytest.raises(DimensionMismatch):
        forward_loss(model, np.zeros((2, 2)), np.array([0.0, 1.0]))


def test_stale_cache_is_rejected():
    spec = ModelSpec(layer_dims=(3, 2), rank=1)
    model = build_model(spec, base_seed=0, adapter_seed=0)
    other = build_model(spec, base_seed=0, adapter_seed=0)
    X, y = make_batch(spec, n=2)
    _, cache = forward_loss(model, X, y)
    with pytest.raises(StaleCache):
        backward(other, cache)
    sgd_step(model, np.ones(model.trainable_count), 0.1)
    with pytest.raises(StaleCache):
        backward(model, cache)


@pytest.mark.parametrize("head", ["mse", "softmax_xent"])
def test_duplicated_batch_gives_single_example_gradient(head):
    spec = ModelSpec(layer_dims=(4, 3, 3), rank=2, head=head)
    model = build_model(spec, base_seed=0, adapter_seed=1)
    load_trainable(model, np.random.default_rng(2).normal(size=spec.trainable_count))
    X, y = make_batch(spec, n=1, seed=3)
    single_loss, cache = forward_loss(model, X, y)
    single = backward(model, cache)
    repeated_loss, cache = forward_loss(model, np.repeat(X, 5, axis=0), np.repeat(y, 5, axis=0))
    assert repeated_loss == pytest.approx(single_loss, rel=1e-12)
    assert_allclose(backward(model, cache), single, rtol=1e-12, atol=1e-14)


def test_sgd_step_moves_against_gradient():
    spec = ModelSpec(layer_dims=(3, 2), rank=1)
    model = build_model(spec, base_seed=0, adapter_seed=0)
    before = trainable_vector(model)
    grad = np.arange(model.trainable_count, dtype=float)
    sgd_step(model, grad, 0.5)
    assert_allclose(trainable_vector(model), before - 0.5 * grad)
    sgd_step(model, grad, 0.0)
    assert_allclose(trainable_vector(model), before - 0.5 * grad)


def test_sgd_step_decreases_loss():
    spec = ModelSpec(layer_dims=(4, 3), rank=2)
    model = build_model(spec, base_seed=0, adapter_seed=1)
    X, y = make_batch(spec, n=8, seed=2)
    losses = []
    for _ in range(20):
        loss, cache = forward_loss(model, X, y)
        losses.append(loss)
        sgd_step(model, backward(model, cache), 0.05)
    assert losses[-1] < losses[0]


def test_length_checks():
    spec = ModelSpec(layer_dims=(3, 2), rank=1)
    model = build_model(spec, base_seed=0, adapter_seed=0)
    with pytest.raises(LengthMismatch):
        load_trainable(model, np.zeros(model.trainable_count - 1))
    with pytest.raises(LengthMismatch):
        sgd_step(model, np.zeros(model.trainable_count + 1), 0.1)
    with pytest.raises(InvalidConfig):
        sgd_step(model, np.zeros(model.trainable_count), -0.1)


def test_segments_cover_trainable_vector():
    spec = ModelSpec(layer_dims=(5, 4, 3), rank=2)
    model = build_model(spec, base_seed=0, adapter_seed=0)
    segments = model.segments()
    assert [(layer, factor) for layer, factor, _ in segments] == [(0, "B"), (0, "A"), (1, "B"), (1, "A")]
    assert segments[0][2].start == 0
    assert segments[-1][2].stop == model.trainable_count
    assert segments[1][2].stop - segments[1][2].start == 2 * 5


def test_checkpoint_round_trip(tmp_path):
    spec = ModelSpec(layer_dims=(4, 3), rank=2)
    model = build_model(spec, base_seed=0, adapter_seed=1)
    load_trainable(model, np.random.default_rng(0).normal(size=model.trainable_count))
    path = tmp_path / "client.ckpt"
    save_checkpoint(model, path)

    fresh = build_model(spec, base_seed=0, adapter_seed=1)
    load_checkpoint(fresh, path)
    assert_array_equal(trainable_vector(fresh), trainable_vector(model))


def test_checkpoint_for_another_shape(tmp_path):
    model = build_model(ModelSpec(layer_dims=(4, 3), rank=2), base_seed=0, adapter_seed=1)
    path = tmp_path / "client.ckpt"
    save_checkpoint(model, path)
    other = build_model(ModelSpec(layer_dims=(4, 3), rank=1), base_seed=0, adapter_seed=1)
    with pytest.raises(DimensionMismatch):
        load_checkpoint(other, path)


def test_full_rank_training_reaches_least_squares_solution():
    spec = ModelSpec(layer_dims=(3, 2), rank=2)
    model = build_model(spec, base_seed=0, adapter_seed=1, init_scale=0.5)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(40, 3))
    Y = X @ rng.normal(size=(2, 3)).T + rng.normal(0.0, 0.1, size=(40, 2))
    for _ in range(5000):
        _, cache = forward_loss(model, X, Y)
        sgd_step(model, backward(model, cache), 0.1)
    ols, *_ = np.linalg.lstsq(X, Y, rcond=None)
    layer = model.layers[0]
    merged = layer.base + layer.b_factor @ layer.a_factor
    assert_allclose(merged, ols.T, atol=2e-3)
