import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ganstab.nn import (
    AdamState, DenseLayer, LSTMCell, Network, ShapeError, StateError,
    adam_step, bce_loss, finite_difference_grad, relative_error,
)


def _hand_forward(x, layers):
    # deliberately loop-based: one output unit at a time
    out = []
    for row in x:
        h = list(row)
        for W, b, act in layers:
            nxt = []
            for j in range(len(b)):
                z = b[j] + sum(W[j][k] * h[k] for k in range(len(h)))
                if act == "leaky_relu":
                    z = z if z > 0 else 0.2 * z
                elif act == "sigmoid":
                    z = 1.0 / (1.0 + math.exp(-z))
                elif act == "tanh":
                    z = math.tanh(z)
                nxt.append(z)
            h = nxt
        out.append(h)
    return np.array(out)


def test_identity_linear_layer():
    net = Network([2, 2], ["linear"], seed=0)
    net.layers[0].weights[...] = np.eye(2)
    net.layers[0].bias[...] = 0
    np.testing.assert_array_equal(net(np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_zero_sigmoid_layer_outputs_half():
    net = Network([3, 4], ["sigmoid"], seed=0)
    net.params[...] = 0
    out = net(np.random.default_rng(1).normal(size=(5, 3)))
    np.testing.assert_array_equal(out, np.full((5, 4), 0.5))


def test_forward_matches_hand_rolled_script():
    net = Network([5, 7, 3], ["leaky_relu", "sigmoid"], seed=11)
    x = np.random.default_rng(3).normal(size=(4, 5))
    layers = [(l.weights.tolist(), l.bias.tolist(), l.activation) for l in net.layers]
    np.testing.assert_allclose(net(x), _hand_forward(x.tolist(), layers), rtol=1e-12, atol=1e-14)


def test_forward_shape_error():
    net = Network([3, 2], ["linear"], seed=0)
    with pytest.raises(ShapeError):
        net.forward(np.zeros((2, 4)))


def test_backward_before_forward():
    net = Network([3, 2], ["linear"], seed=0)
    with pytest.raises(StateError):
        net.backward(np.zeros((1, 2)))
    layer = DenseLayer(2, 2)
    with pytest.raises(StateError):
        layer.backward(np.zeros((1, 2)))


def test_linear_scalar_chain_rule():
    net = Network([1, 1], ["linear"], seed=0)
    net.layers[0].weights[...] = 2.5
    net.forward(np.array([[0.7]]))
    assert net.backward(np.ones((1, 1)))[0, 0] == 2.5


def _net_loss(net, x, upstream):
    return float(np.sum(net(x) * upstream))


@pytest.mark.parametrize("acts", [
    ["leaky_relu", "leaky_relu", "sigmoid"],
    ["tanh", "sigmoid", "linear"],
])
def test_parameter_and_input_gradients_match_finite_differences(acts):
    rng = np.random.default_rng(5)
    net = Network([4, 6, 5, 2], acts, seed=2)
    x = rng.normal(size=(3, 4))
    up = rng.normal(size=(3, 2))
    net.forward(x)
    gx = net.backward(up)
    analytic = net.grads.copy()
    numeric = finite_difference_grad(lambda: _net_loss(net, x, up), net.params)
    assert relative_error(analytic, numeric, floor=1e-6) < 1e-4
    numeric_x = finite_difference_grad(lambda: _net_loss(net, x, up), x)
    assert relative_error(gx, numeric_x, floor=1e-6) < 1e-4


def test_forward_deterministic_and_seeded_init():
    a = Network([12, 16, 1], ["leaky_relu", "sigmoid"], seed=9)
    b = Network([12, 16, 1], ["leaky_relu", "sigmoid"], seed=9)
    np.testing.assert_array_equal(a.params, b.params)
    x = np.random.default_rng(0).normal(size=(8, 12))
    assert a(x).tobytes() == b(x).tobytes()


def test_glorot_bounds():
    net = Network([100, 128], ["linear"], seed=1)
    lim = math.sqrt(6 / 228)
    assert np.all(np.abs(net.layers[0].weights) <= lim)
    assert np.all(net.layers[0].bias == 0)


def test_bce_analytic_values():
    loss, _ = bce_loss(np.array([[0.5]]), np.array([[1.0]]))
    assert loss == pytest.approx(math.log(2), abs=1e-12)
    loss, _ = bce_loss(np.array([[0.9], [0.1]]), np.array([[1.0], [0.0]]))
    assert loss == pytest.approx(-math.log(0.9), abs=1e-12)
    assert loss == pytest.approx(0.1054, abs=1e-4)
    loss, _ = bce_loss(np.array([[1.0], [0.0]]), np.array([[1.0], [0.0]]))
    assert 0 <= loss <= -math.log(1 - 1e-7) + 1e-15


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=6), st.integers(0, 2**16))
def test_bce_gradient_matches_finite_difference(ps, seed):
    p = np.array(ps).reshape(-1, 1)
    t = np.random.default_rng(seed).integers(0, 2, size=p.shape).astype(float)
    _, g = bce_loss(p, t)
    num = finite_difference_grad(lambda: bce_loss(p, t)[0], p, step=1e-7)
    assert relative_error(g, num, floor=1e-8) < 1e-6


def test_adam_zero_gradient_keeps_params():
    p = np.array([1.0, -2.0])
    st_ = AdamState(2)
    adam_step(p, np.zeros(2), st_)
    np.testing.assert_array_equal(p, [1.0, -2.0])
    assert st_.t == 1


def test_adam_first_step_is_signed_lr():
    p = np.array([0.3])
    adam_step(p, np.array([1.0]), AdamState(1, learning_rate=2e-4))
    assert 0.3 - p[0] == pytest.approx(2e-4 / (1 + 1e-8), rel=1e-9)


def test_adam_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(np.zeros(3), np.zeros(2), AdamState(3))


def test_adam_decreases_quadratic():
    w = np.array([1.0])
    st_ = AdamState(1, learning_rate=1e-2)
    mags = []
    for _ in range(100):
        adam_step(w, 2 * w, st_)
        mags.append(abs(w[0]))
    assert all(b < a for a, b in zip(mags[5:], mags[6:]))
    assert mags[-1] < 1.0


def test_lstm_zero_everything_stays_zero():
    cell = LSTMCell(3, 4, seed=0)
    cell.params[...] = 0
    hs = cell.forward([np.zeros((2, 3))] * 5)
    for h in hs:
        np.testing.assert_array_equal(h, 0)


def test_lstm_empty_sequence():
    with pytest.raises(ValueError):
        LSTMCell(2, 2, seed=0).forward([])


def test_lstm_hidden_bounded():
    cell = LSTMCell(3, 5, seed=1)
    rng = np.random.default_rng(0)
    for h in cell.forward([rng.normal(scale=10, size=(4, 3)) for _ in range(6)]):
        assert np.all(np.linalg.norm(h, axis=1) <= 5)
        assert np.all(np.abs(h) < 1)


def test_lstm_gate_shapes():
    cell = LSTMCell(3, 5, seed=1)
    for g in LSTMCell.GATES:
        W, b = cell.gate(g)
        assert W.shape == (5, 8) and b.shape == (5,)


def test_lstm_bptt_matches_finite_differences():
    rng = np.random.default_rng(7)
    cell = LSTMCell(3, 4, seed=3)
    seq = [rng.normal(size=(2, 3)) for _ in range(3)]
    ups = [rng.normal(size=(2, 4)) for _ in range(3)]

    def loss():
        return float(sum(np.sum(h * u) for h, u in zip(cell.forward(seq), ups)))

    cell.forward(seq)
    dxs = cell.backward(ups)
    analytic = cell.grads.copy()
    numeric = finite_difference_grad(loss, cell.params)
    assert relative_error(analytic, numeric, floor=1e-6) < 1e-4
    for x, dx in zip(seq, dxs):
        assert relative_error(dx, finite_difference_grad(loss, x), floor=1e-6) < 1e-4
