from __future__ import annotations

import numpy as np
import pytest

from oracles import finite_difference_gradient, relative_error
from ssrmap.nnkit import AdamState, DenseNet, adam_step, load_params, save_params


def test_identity_init_square_linear_is_exact_identity() -> None:
    net = DenseNet((5, 5), init="identity", init_scale=0.0)
    x = np.random.default_rng(0).normal(size=(4, 5))
    assert np.array_equal(net.forward(x), x)


def test_forward_shapes_and_validation() -> None:
    net = DenseNet((3, 7, 2), activation="tanh", seed=1)
    out = net.forward(np.ones((10, 3)))
    assert out.shape == (10, 2)
    single = net.forward(np.ones(3))
    assert single.shape == (2,)
    np.testing.assert_allclose(single, out[0], rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        net.forward(np.ones((10, 4)))
    with pytest.raises(ValueError):
        DenseNet((3,))
    with pytest.raises(ValueError):
        DenseNet((3, 2), activation="relu")


@pytest.mark.parametrize(
    "sizes,activation",
    [((4, 3), "identity"), ((4, 6, 3), "tanh"), ((5, 4, 4, 2), "tanh"), ((3, 8, 3), "identity")],
)
def test_backward_matches_finite_differences(sizes: tuple[int, ...], activation: str) -> None:
    rng = np.random.default_rng(42)
    net = DenseNet(sizes, activation=activation, init_scale=0.4, seed=9)
    x = rng.normal(size=(6, sizes[0]))
    projection = rng.normal(size=(6, sizes[-1]))

    def loss_at(flat: np.ndarray) -> float:
        net.set_params(flat)
        return float((net.forward(x) * projection).sum())

    params = net.get_params()
    out, cache = net.forward_cached(x)
    analytic, grad_x = net.backward(cache, projection)
    numeric = finite_difference_gradient(loss_at, params)
    net.set_params(params)
    assert relative_error(analytic, numeric) <= 1e-4

    def loss_at_input(flat_x: np.ndarray) -> float:
        return float((net.forward(flat_x.reshape(x.shape)) * projection).sum())

    numeric_x = finite_difference_gradient(loss_at_input, x.ravel())
    assert relative_error(grad_x.ravel(), numeric_x) <= 1e-4


def test_param_flatten_layout_and_round_trip() -> None:
    net = DenseNet((2, 3, 2), seed=4)
    flat = np.arange(net.num_params, dtype=np.float64)
    net.set_params(flat)
    # Layout: layer-0 weights row-major, layer-1 weights, then biases per layer.
    np.testing.assert_array_equal(net.weights[0], flat[:6].reshape(2, 3))
    np.testing.assert_array_equal(net.weights[1], flat[6:12].reshape(3, 2))
    np.testing.assert_array_equal(net.biases[0], flat[12:15])
    np.testing.assert_array_equal(net.biases[1], flat[15:17])
    assert np.array_equal(net.get_params(), flat)
    with pytest.raises(ValueError):
        net.set_params(flat[:-1])


def test_adam_first_step_is_signed_learning_rate() -> None:
    grads = np.array([3.0, -0.5, 1e-3])
    state = AdamState.zeros(3)
    new = adam_step(np.zeros(3), grads, state, learning_rate=0.01)
    np.testing.assert_allclose(new, -0.01 * np.sign(grads), rtol=1e-5)
    assert state.step == 1


def test_adam_minimizes_square() -> None:
    x = np.array([1.0])
    state = AdamState.zeros(1)
    prev = abs(float(x[0]))
    for _ in range(10):
        grad = 2.0 * x
        x = adam_step(x, grad, state, learning_rate=0.1)
        cur = abs(float(x[0]))
        assert cur < prev
        prev = cur


def test_adam_zero_learning_rate_keeps_params() -> None:
    params = np.array([0.3, -1.2, 8.0])
    state = AdamState.zeros(3)
    new = adam_step(params, np.array([1.0, -2.0, 3.0]), state, learning_rate=0.0)
    assert np.array_equal(new, params)


def test_checkpoint_round_trip(tmp_path) -> None:
    net = DenseNet((4, 6, 3), activation="tanh", init_scale=0.3, seed=13)
    path = str(tmp_path / "net.ssrn")
    save_params(net, path)
    loaded = load_params(path)
    assert loaded.layer_sizes == net.layer_sizes
    assert loaded.activation == net.activation
    assert np.array_equal(loaded.get_params(), net.get_params())


def test_checkpoint_rejects_garbage(tmp_path) -> None:
    path = tmp_path / "bad.ssrn"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_params(str(path))
    net = DenseNet((3, 3))
    good = tmp_path / "good.ssrn"
    save_params(net, str(good))
    truncated = good.read_bytes()[:-8]
    bad = tmp_path / "trunc.ssrn"
    bad.write_bytes(truncated)
    with pytest.raises(ValueError, match="payload"):
        load_params(str(bad))
