import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvlab.net import (
    Network,
    ShapeError,
    backward,
    backward_sampled,
    cross_entropy,
    flatten,
    forward,
    init_network,
    log_softmax,
    loss_and_grad,
    sample_labels,
    unflatten,
)
from curvlab.oracle import analytic_grad, finite_diff_grad


def test_identity_forward():
    net = Network([np.eye(2)], loss="mse")
    tr = forward(net, np.array([[2.0], [3.0]]))
    np.testing.assert_array_equal(tr.logits, [[2.0], [3.0]])


def test_relu_kills_negative_preactivation():
    net = Network([np.array([[1.0, -1.0]]), np.array([[1.0]])], activation="relu", loss="mse")
    tr = forward(net, np.array([[1.0], [2.0]]))
    assert tr.S[0][0, 0] == -1.0
    assert tr.A[1][0, 0] == 0.0


def test_two_layer_shapes_match_hand_chain():
    net = init_network([4, 3, 2], seed=1)
    X = np.random.default_rng(0).standard_normal((4, 5))
    tr = forward(net, X)
    s0 = net.weights[0] @ X
    assert tr.A[1].shape == (3, 5)
    np.testing.assert_array_equal(tr.S[0], s0)
    np.testing.assert_array_equal(tr.S[1], net.weights[1] @ np.maximum(s0, 0))


def test_shape_errors_name_layer():
    with pytest.raises(ShapeError, match="layer 1"):
        Network([np.zeros((3, 2)), np.zeros((2, 4))])
    net = init_network([3, 2])
    with pytest.raises(ShapeError, match="layer 0"):
        forward(net, np.zeros((4, 2)))


def test_toy_gradient():
    net = Network([np.zeros((1, 2))], loss="mse")
    tr = forward(net, np.array([[3.0], [1.0]]))
    tr, grads = backward(net, tr, np.array([[1.0]]))
    assert tr.E[-1][0, 0] == -1.0
    np.testing.assert_array_equal(grads[0], [[-3.0, -1.0]])


def test_perfect_prediction_has_zero_gradient():
    # saturated softmax: errors underflow to exactly zero
    net = Network([np.array([[800.0, 0.0], [0.0, 0.0]])])
    tr = forward(net, np.array([[1.0], [0.0]]))
    tr, grads = backward(net, tr, np.array([0]))
    assert np.all(tr.E[0] == 0) and np.all(grads[0] == 0)


def test_gradient_factorization_exact():
    net = init_network([5, 4, 3], "tanh", seed=2)
    X = np.random.default_rng(1).standard_normal((5, 6))
    tr, grads = backward(net, forward(net, X), np.array([0, 1, 2, 0, 1, 2]))
    for k, g in enumerate(grads):
        np.testing.assert_array_equal(g, tr.E[k] @ tr.A[k].T)


def test_three_layer_relu_finite_differences():
    net = init_network([3, 4, 4, 2], "relu", "ce", seed=7)
    X = np.random.default_rng(3).standard_normal((3, 4))
    y = np.array([0, 1, 1, 0])
    fd = finite_diff_grad(net, X, y, 1e-5)
    an = analytic_grad(net, X, y)
    assert np.linalg.norm(fd - an) / np.linalg.norm(an) <= 1e-5


def test_targets_length_checked():
    net = init_network([2, 3])
    with pytest.raises(ShapeError):
        backward(net, forward(net, np.zeros((2, 4))), np.array([0, 1]))


def test_pure_forward_backward():
    net = init_network([3, 3, 2], seed=0)
    X = np.random.default_rng(0).standard_normal((3, 5))
    y = np.array([0, 1, 0, 1, 1])
    a = loss_and_grad(net, X, y)
    b = loss_and_grad(net, X, y)
    assert a[0] == b[0]
    for g1, g2 in zip(a[1], b[1]):
        np.testing.assert_array_equal(g1, g2)


def test_sample_labels_saturated():
    logits = np.tile(np.array([[50.0], [0.0], [0.0]]), (1, 10_000))
    labels = sample_labels(logits, "ce", seed=0).labels
    assert (labels == 0).mean() > 0.999


def test_sample_labels_uniform():
    labels = sample_labels(np.zeros((3, 30_000)), "ce", seed=1).labels
    for c in range(3):
        assert abs((labels == c).mean() - 1 / 3) <= 0.01


def test_sample_labels_sigmoid_frequency():
    logits = np.tile(np.array([[1.0], [0.0]]), (1, 100_000))
    labels = sample_labels(logits, "ce", seed=2).labels
    assert abs((labels == 0).mean() - np.e / (1 + np.e)) <= 0.005


def test_sample_labels_deterministic():
    z = np.random.default_rng(0).standard_normal((4, 50))
    a = sample_labels(z, "ce", seed=5).labels
    b = sample_labels(z, "ce", seed=5).labels
    np.testing.assert_array_equal(a, b)


def test_backward_sampled_saturated_is_zero():
    net = Network([np.array([[800.0, 0.0], [0.0, 0.0]])])
    tr = forward(net, np.array([[1.0], [0.0]]))
    tr = backward_sampled(net, tr, sample_labels(tr.logits, "ce", seed=0))
    assert np.all(tr.E_F[0] == 0)


def test_backward_sampled_gaussian_residual_variance():
    net = Network([np.array([[0.5, -0.2], [0.1, 0.3]])], loss="mse")
    X = np.random.default_rng(0).standard_normal((2, 100_000))
    tr = forward(net, X)
    tr = backward_sampled(net, tr, sample_labels(tr.logits, "mse", seed=3))
    per_sample = tr.E_F[0] * tr.D
    var = per_sample.var(axis=1)
    assert np.all(np.abs(var - 1) <= 0.02)


def test_backward_sampled_keeps_supervised_errors():
    net = init_network([3, 4], seed=0)
    X = np.random.default_rng(0).standard_normal((3, 20))
    y = np.zeros(20, dtype=int)
    tr, _ = backward(net, forward(net, X), y)
    tr2 = backward_sampled(net, tr, sample_labels(tr.logits, "ce", seed=0))
    np.testing.assert_array_equal(tr2.E[0], tr.E[0])
    differ = sample_labels(tr.logits, "ce", seed=0).labels != y
    assert differ.any()
    assert not np.allclose(tr2.E_F[0][:, differ], tr.E[0][:, differ])


def test_cross_entropy_keeps_tiny_losses():
    z = np.array([[100.0], [0.0]])
    assert 0 < cross_entropy(z, np.array([0]))[0] < 1e-40


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=6), st.data())
def test_cross_entropy_matches_log_softmax(col, data):
    z = np.array(col)[:, None]
    y = np.array([data.draw(st.integers(0, len(col) - 1))])
    ref = -log_softmax(z)[y[0], 0]
    assert abs(cross_entropy(z, y)[0] - ref) <= 1e-12 * max(1.0, abs(ref))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**31 - 1))
def test_flatten_roundtrip(sizes, seed):
    net = init_network(sizes, seed=seed)
    back = unflatten(flatten(net.weights), net.shapes)
    for a, b in zip(net.weights, back):
        np.testing.assert_array_equal(a, b)


def test_kaiming_scale():
    w = init_network([400, 300], seed=0).weights[0]
    assert abs(w.std() - np.sqrt(2 / 400)) < 0.002
