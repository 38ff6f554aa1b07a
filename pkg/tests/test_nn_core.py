import math

import numpy as np
import pytest

from delaypipe.errors import ShapeError, StaleCacheError, TrainingDivergedError
from delaypipe.nn_core import (
    Layer,
    LayerGrads,
    SgdConfig,
    accuracy,
    backward,
    forward,
    grad_check,
    init_mlp,
    loss_and_grads,
    predict,
    sgd_step,
    softmax_ce,
)


@pytest.fixture
def small_mlp():
    mlp = init_mlp([3, 5, 4, 2], seed=1)
    rng = np.random.default_rng(1)
    for layer in mlp.layers:
        layer.b = rng.standard_normal(layer.b.shape) * 0.1
    return mlp


def test_init_mlp_shapes():
    mlp = init_mlp([2, 8, 3], seed=0)
    assert mlp.sizes == [2, 8, 3]
    assert [layer.activation for layer in mlp.layers] == ["relu", "identity"]
    assert mlp.weight_bytes() == [8 * 2 * 8, 3 * 8 * 8]
    assert np.array_equal(init_mlp([2, 8, 3], seed=0).layers[0].W, mlp.layers[0].W)


def test_init_mlp_rejects_bad_sizes():
    with pytest.raises(ShapeError):
        init_mlp([4], seed=0)


def test_forward_relu():
    layer = Layer(np.array([[1.0, -1.0]]), np.array([0.5]))
    y, cache = forward(layer, np.array([[1.0, 3.0], [3.0, 1.0]]))
    assert y.tolist() == [[0.0], [2.5]]
    assert cache.z.tolist() == [[-1.5], [2.5]]


def test_forward_shape_mismatch():
    layer = Layer(np.ones((2, 3)), np.zeros(2))
    with pytest.raises(ShapeError):
        forward(layer, np.ones((4, 2)))


def test_backward_consumes_cache():
    layer = Layer(np.ones((2, 3)), np.zeros(2))
    _, cache = forward(layer, np.ones((4, 3)))
    backward(layer, cache, np.ones((4, 2)))
    with pytest.raises(StaleCacheError):
        backward(layer, cache, np.ones((4, 2)))


def test_backward_uses_given_weights_for_input_gradient():
    layer = Layer(np.ones((1, 2)), np.zeros(1), "identity")
    _, cache = forward(layer, np.ones((1, 2)))
    grads = backward(layer, cache, np.ones((1, 1)), weights=np.array([[2.0, 3.0]]))
    assert grads.dX.tolist() == [[2.0, 3.0]]


def test_softmax_ce_uniform_logits():
    loss, grad = softmax_ce(np.zeros((2, 4)), [0, 3])
    assert loss == pytest.approx(math.log(4))
    assert grad.sum() == pytest.approx(0.0)
    assert grad[0, 0] == pytest.approx((0.25 - 1) / 2)


def test_softmax_ce_rejects_bad_labels():
    with pytest.raises(ShapeError):
        softmax_ce(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ShapeError):
        softmax_ce(np.zeros((2, 3)), [0])


def test_gradients_match_finite_differences(small_mlp):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 3))
    y = rng.integers(0, 2, size=6)
    errors = grad_check(small_mlp, x, y)
    assert set(errors) == {"W0", "b0", "W1", "b1", "W2", "b2", "x"}
    assert max(errors.values()) < 1e-5


def test_sgd_step_plain():
    layer = Layer(np.ones((1, 2)), np.zeros(1))
    grads = LayerGrads(np.array([[1.0, 2.0]]), np.array([1.0]), np.zeros((1, 1)))
    old = layer.W
    _, update = sgd_step(layer, grads, SgdConfig(lr=0.5), 0)
    assert layer.W.tolist() == [[0.5, 0.0]]
    assert update.dW.tolist() == [[-0.5, -1.0]]
    # the previous array object is left untouched
    assert old.tolist() == [[1.0, 1.0]]


def test_sgd_step_momentum_accumulates():
    layer = Layer(np.zeros((1, 1)), np.zeros(1))
    grads = LayerGrads(np.ones((1, 1)), np.zeros(1), np.zeros((1, 1)))
    cfg = SgdConfig(lr=1.0, momentum=0.5)
    sgd_step(layer, grads, cfg, 0)
    _, update = sgd_step(layer, grads, cfg, 1)
    assert update.dW[0, 0] == pytest.approx(-1.5)
    assert layer.W[0, 0] == pytest.approx(-2.5)


def test_sgd_step_weight_decay():
    layer = Layer(np.full((1, 1), 2.0), np.zeros(1))
    grads = LayerGrads(np.zeros((1, 1)), np.zeros(1), np.zeros((1, 1)))
    _, update = sgd_step(layer, grads, SgdConfig(lr=0.1, weight_decay=0.5), 0)
    assert update.dW[0, 0] == pytest.approx(-0.1)


def test_sgd_step_divergence():
    layer = Layer(np.ones((1, 1)), np.zeros(1))
    grads = LayerGrads(np.array([[np.inf]]), np.zeros(1), np.zeros((1, 1)))
    with pytest.raises(TrainingDivergedError):
        sgd_step(layer, grads, SgdConfig(), 3)
    assert layer.W[0, 0] == 1.0


def test_cosine_schedule():
    cfg = SgdConfig(lr=1.0, lr_schedule="cosine", t_max=10)
    assert cfg.lr_at(0) == pytest.approx(1.0)
    assert cfg.lr_at(5) == pytest.approx(0.5)
    assert cfg.lr_at(10) == pytest.approx(0.0)
    assert cfg.lr_at(50) == pytest.approx(0.0)
    assert SgdConfig(lr=0.3).lr_at(1000) == 0.3


@pytest.mark.parametrize(
    "kwargs",
    [{"lr": 0.0}, {"momentum": 1.0}, {"weight_decay": -1.0}, {"lr_schedule": "step"}, {"lr_schedule": "cosine"}],
)
def test_sgd_config_validation(kwargs):
    with pytest.raises(ValueError):
        SgdConfig(**kwargs)


def test_training_reduces_loss():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 2))
    y = (x[:, 0] > 0).astype(np.int64)
    mlp = init_mlp([2, 16, 2], seed=0)
    first, _ = loss_and_grads(mlp, x, y)
    cfg = SgdConfig(lr=0.2)
    for t in range(100):
        _, grads = loss_and_grads(mlp, x, y)
        for layer, g in zip(mlp.layers, grads):
            sgd_step(layer, g, cfg, t)
    last, _ = loss_and_grads(mlp, x, y)
    assert last < first
    assert accuracy(mlp, x, y) > 0.9
    assert predict(mlp, x).shape == (64, 2)
