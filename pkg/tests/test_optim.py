import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvlab import curvature as cv
from curvlab import optim
from curvlab.net import Network, init_network
from curvlab.oracle import dense_kron_curvature, dense_kron_solve


def _spd(n, seed):
    a = np.random.default_rng(seed).standard_normal((n, n + 2))
    return a @ a.T / (n + 2)


# ---------------------------------------------------------------- damping split

def test_damping_split_equal_traces():
    sa = np.diag([2.0, 2.0, 2.0])  # Tr 6, m = 3
    se = np.diag([2.0, 2.0])       # Tr 4, n = 2
    lam_a, lam_e = optim.damping_split(1.0, sa, se)
    assert lam_a == pytest.approx(1.0, abs=1e-15) and lam_e == pytest.approx(1.0, abs=1e-15)


def test_damping_split_ratio_four():
    # n Tr(A) / (m Tr(E)) = 4
    sa, se = np.eye(1) * 4.0, np.eye(1)
    lam_a, lam_e = optim.damping_split(4.0, sa, se)
    assert lam_a == pytest.approx(4.0, rel=1e-15) and lam_e == pytest.approx(1.0, rel=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 1e3), st.integers(0, 1000))
def test_damping_split_product(lam, seed):
    lam_a, lam_e = optim.damping_split(lam, _spd(3, seed), _spd(2, seed + 1))
    assert abs(lam_a * lam_e - lam) <= 1e-12 * lam


def test_damping_split_zero_trace_clamps(caplog):
    with caplog.at_level("WARNING"):
        lam_a, lam_e = optim.damping_split(1.0, np.eye(2), np.zeros((2, 2)))
    assert "zero trace" in caplog.text
    assert lam_a / lam_e == pytest.approx(1e12)
    lam_a, lam_e = optim.damping_split(2.0, np.zeros((2, 2)), np.zeros((2, 2)))
    assert lam_a == lam_e == pytest.approx(np.sqrt(2.0))


# ---------------------------------------------------------------- EMA

def test_ema_zero_decay_is_current():
    e = optim.EMA(0.0)
    e.update(np.eye(2))
    e.update(3 * np.eye(2))
    np.testing.assert_array_equal(e.value, 3 * np.eye(2))


def test_ema_constant_fixed_point():
    e = optim.EMA(0.95)
    for _ in range(7):
        e.update(np.full((2, 2), 5.0))
        np.testing.assert_allclose(e.value, 5.0, rtol=1e-15)


def test_ema_two_terms_by_hand():
    e = optim.EMA(0.95)
    x1, x2 = np.eye(2), np.array([[0.0, 1.0], [1.0, 0.0]])
    e.update(x1)
    e.update(x2)
    w1, w2 = 0.95 * 0.05, 0.05
    np.testing.assert_allclose(e.value, (w1 * x1 + w2 * x2) / (w1 + w2), rtol=1e-15)
    assert abs(e.coefficients().sum() - 1) <= 1e-12


def test_ema_rejects_bad_decay():
    with pytest.raises(ValueError):
        optim.EMA(1.0)


# ---------------------------------------------------------------- KFAC directions

def test_kfac_heuristic_cold_start_is_scaled_sgd():
    g = np.arange(6.0).reshape(2, 3)
    lam = 0.5
    lam_a, lam_e = optim.damping_split(lam, np.zeros((3, 3)), np.zeros((2, 2)))
    d = optim.kfac_update_heuristic(g, optim.damped_inverse(np.zeros((3, 3)), lam_a),
                                    optim.damped_inverse(np.zeros((2, 2)), lam_e))
    np.testing.assert_allclose(d, g / lam, rtol=1e-14)


def test_kfac_heuristic_identity_second_factor():
    g = np.random.default_rng(0).standard_normal((3, 4))
    sa = _spd(4, 1)
    lam_a, c = 0.3, 2.5
    p_e = optim.damped_inverse(np.zeros((3, 3)), c)  # Sigma_E + lam_E I = c I
    d = optim.kfac_update_heuristic(g, optim.damped_inverse(sa, lam_a), p_e)
    f = optim.foof_update(g, optim.damped_inverse(sa, lam_a))
    np.testing.assert_allclose(d, f / c, rtol=1e-12)


def test_kfac_heuristic_dense():
    g = np.random.default_rng(2).standard_normal((3, 4))
    sa, se = _spd(4, 3), _spd(3, 4)
    lam_a, lam_e = 0.2, 0.7
    d = optim.kfac_update_heuristic(g, optim.damped_inverse(sa, lam_a), optim.damped_inverse(se, lam_e))
    ref = dense_kron_solve(dense_kron_curvature(sa, se, "heuristic", lam_a=lam_a, lam_e=lam_e), g)
    np.testing.assert_allclose(d, ref, atol=1e-10)


def test_kfac_standard_identity_factors():
    g = np.random.default_rng(0).standard_normal((2, 3))
    d = optim.kfac_update_standard(g, optim.Eigenbasis.of(np.eye(3), np.eye(2)), 1.0)
    np.testing.assert_allclose(d, g / 2, rtol=1e-14)


def test_kfac_standard_zero_factor():
    g = np.random.default_rng(0).standard_normal((2, 3))
    d = optim.kfac_update_standard(g, optim.Eigenbasis.of(_spd(3, 0), np.zeros((2, 2))), 0.4)
    np.testing.assert_allclose(d, g / 0.4, rtol=1e-12)


def test_kfac_standard_dense_3x2():
    g = np.random.default_rng(5).standard_normal((3, 2))
    sa, se = _spd(2, 6), _spd(3, 7)
    d = optim.kfac_update_standard(g, optim.Eigenbasis.of(sa, se), 0.1)
    ref = dense_kron_solve(dense_kron_curvature(sa, se, "standard", lam=0.1), g)
    assert np.linalg.norm(d - ref) / np.linalg.norm(ref) <= 1e-8


def test_heuristic_expansion_has_cross_terms():
    sa, se = _spd(3, 8), _spd(2, 9)
    lam_a, lam_e = 0.3, 2.0
    h = dense_kron_curvature(sa, se, "heuristic", lam_a=lam_a, lam_e=lam_e)
    s = dense_kron_curvature(sa, se, "standard", lam=lam_a * lam_e)
    x = dense_kron_curvature(sa, se, "cross", lam_a=lam_a, lam_e=lam_e)
    np.testing.assert_allclose(h, s + x, atol=1e-10)


# ---------------------------------------------------------------- FOOF

def test_foof_toy_update():
    A = np.array([[3.0, 1.0], [1.0, 0.0]])
    E = np.array([[1.0, -1.0]])  # descent errors
    grad = E @ A.T  # descent direction, summed over datapoints
    d = optim.foof_update(E @ A.T, optim.damped_inverse(A @ A.T, 0.0))
    np.testing.assert_allclose(grad, [[2.0, 1.0]], atol=1e-15)
    np.testing.assert_allclose(d, [[-1.0, 4.0]], atol=1e-12)
    # reaches both targets
    np.testing.assert_allclose(d @ A, [[1.0, -1.0]], atol=1e-12)


def test_foof_zero_errors():
    d = optim.foof_update(np.zeros((2, 3)), optim.damped_inverse(_spd(3, 0), 0.1))
    np.testing.assert_array_equal(d, 0)


def test_foof_single_datapoint_sherman_morrison():
    a = np.array([1.0, -2.0, 0.5])
    e = np.array([0.3, 1.1])
    lam, eta = 0.7, 0.9
    d = optim.foof_update(np.outer(e, a), optim.damped_inverse(np.outer(a, a), lam), eta)
    np.testing.assert_allclose(d, eta * np.outer(e, a) / (lam + a @ a), rtol=1e-12)


def test_foof_singular_undamped_raises():
    with pytest.raises(cv.CurvatureError):
        optim.damped_inverse(np.ones((2, 2)), 0.0)


# ---------------------------------------------------------------- schedule

def test_schedule_unamortized():
    for t in range(5):
        assert optim.amortization_schedule(t, 1, 1) == {"refresh_inverse": True, "accumulate": True}


def test_schedule_T100_S100():
    s = [optim.amortization_schedule(t, 100, 100) for t in range(300)]
    assert all(x["accumulate"] for x in s)
    assert [t for t, x in enumerate(s) if x["refresh_inverse"]] == [0, 100, 200]


def test_schedule_T500_S10():
    acc = [t for t in range(1500) if optim.amortization_schedule(t, 500, 10)["accumulate"]]
    assert acc == [t for t in range(1500) if 490 <= t % 500 <= 499]
    ref = [t for t in range(1500) if optim.amortization_schedule(t, 500, 10)["refresh_inverse"]]
    assert ref == [0, 500, 1000]


def test_schedule_rejects_S_above_T():
    with pytest.raises(ValueError):
        optim.amortization_schedule(0, 5, 6)


# ---------------------------------------------------------------- baselines

def test_sgd_momentum_zero_is_plain_sgd():
    g = np.array([1.0, -2.0])
    dw, _ = optim.sgd_momentum_step(g, None, 0.1, 0.0)
    np.testing.assert_allclose(dw, -0.1 * g)


def test_sgd_momentum_geometric_buffer():
    g = np.array([1.0, 2.0])
    buf = None
    for k in range(1, 8):
        _, buf = optim.sgd_momentum_step(g, buf, 0.1, 0.9)
        np.testing.assert_allclose(buf, g * (1 - 0.9**k) / 0.1, rtol=1e-13)


def test_adam_zero_gradient():
    dw, _ = optim.adam_step(np.zeros(3), None, 0.01)
    np.testing.assert_array_equal(dw, 0)


# ---------------------------------------------------------------- config and optimizers

@pytest.mark.parametrize("kw", [
    dict(kind="nope"), dict(lr=0.0), dict(kind="ng", damping=0.0),
    dict(damping=-1.0), dict(T=2, S=3),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        optim.OptimizerConfig(**kw)


def test_subsampled_forces_zero_ema():
    assert optim.OptimizerConfig(kind="kfac-heuristic", subsampled=True).ema_decay == 0.0


def _problem(seed=0, sizes=(4, 5, 3), B=12):
    rng = np.random.default_rng(seed)
    net = init_network(list(sizes), "relu", "ce", seed=seed)
    return net, rng.standard_normal((sizes[0], B)), rng.integers(0, sizes[-1], B)


@pytest.mark.parametrize("kind", optim.KINDS)
def test_every_kind_decreases_loss(kind):
    net, X, y = _problem()
    cfg = optim.OptimizerConfig(kind=kind, lr=0.05 if kind in ("sgd", "adam") else 0.2,
                                damping=0.5, ema_decay=0.0)
    opt = optim.make_optimizer(cfg, net, seed=0)
    first = opt.step(net, X, y).loss
    for _ in range(20):
        last = opt.step(net, X, y).loss
    assert last < first


def test_kfac_cold_start_first_step_is_sgd_over_lambda():
    net, X, y = _problem(1)
    cfg = optim.OptimizerConfig(kind="kfac-heuristic", lr=1.0, damping=2.0)
    opt = optim.make_optimizer(cfg, net)
    opt.state.refresh("kfac-heuristic")  # zero factors
    st = opt.state
    g = np.random.default_rng(0).standard_normal(net.shapes[0])
    d = optim.kfac_update_heuristic(g, st.P_A[0], st.P_E[0])
    np.testing.assert_allclose(d, g / 2.0, rtol=1e-12)
    st.refresh("foof")
    np.testing.assert_allclose(optim.foof_update(g, st.P_A[0]), g / 2.0, rtol=1e-12)


def test_refresh_split_product_every_refresh():
    net, X, y = _problem(2)
    cfg = optim.OptimizerConfig(kind="kfac-heuristic", lr=0.1, damping=0.3, T=3, S=2)
    opt = optim.make_optimizer(cfg, net, seed=1)
    for _ in range(9):
        opt.step(net, X, y)
        for lam_a, lam_e in opt.state.split:
            assert abs(lam_a * lam_e - 0.3) <= 1e-12 * 0.3


def test_step_order_accumulate_then_refresh():
    # with T=S=1 and m=0 the inverse always reflects the current batch
    net, X, y = _problem(3)
    cfg = optim.OptimizerConfig(kind="foof", lr=0.1, damping=0.1, ema_decay=0.0)
    opt = optim.make_optimizer(cfg, net)
    p = opt.propose(net, X, y)
    sa = X @ X.T / X.shape[1]
    np.testing.assert_allclose(p.info["dirs"][0], p.grads[0] @ np.linalg.inv(sa + 0.1 * np.eye(4)),
                               rtol=1e-10)


def test_foof_kfac_damping_flag():
    net, X, y = _problem(4)
    cfg = optim.OptimizerConfig(kind="foof", lr=0.1, damping=0.2, ema_decay=0.0, foof_kfac_damping=True)
    opt = optim.make_optimizer(cfg, net, seed=0)
    p = opt.propose(net, X, y)
    for k, (g, d) in enumerate(zip(p.grads, p.info["dirs"])):
        lam_a, lam_e = opt.state.split[k]
        sa = opt.state.sigma_a(k)
        ref = g @ np.linalg.inv(sa + lam_a * np.eye(sa.shape[0])) / lam_e
        np.testing.assert_allclose(d, ref, rtol=1e-10)


def test_one_layer_ng_equals_blockdiag_trajectory():
    net, X, y = _problem(5, sizes=(6, 4), B=10)
    a, b = net.copy(), net.copy()
    oa = optim.make_optimizer(optim.OptimizerConfig(kind="ng", lr=0.5, damping=0.1), a, seed=3)
    ob = optim.make_optimizer(optim.OptimizerConfig(kind="ng-blockdiag", lr=0.5, damping=0.1), b, seed=3)
    for _ in range(10):
        oa.step(a, X, y)
        ob.step(b, X, y)
        np.testing.assert_allclose(a.weights[0], b.weights[0], atol=1e-8, rtol=0)


def test_independent_batch_first_update_same_second_differs():
    net, X1, y1 = _problem(6, B=8)
    _, X2, y2 = _problem(7, B=8)
    runs = {}
    for policy in ("same-batch", "independent-batch"):
        n = net.copy()
        opt = optim.make_optimizer(optim.OptimizerConfig(kind="ng", lr=0.3, damping=0.1, policy=policy), n, seed=0)
        runs[policy] = [opt.step(n, X, y).updates[0].copy() for X, y in ((X1, y1), (X2, y2))]
    np.testing.assert_array_equal(runs["same-batch"][0], runs["independent-batch"][0])
    assert not np.allclose(runs["same-batch"][1], runs["independent-batch"][1])


def test_weight_decay_is_decoupled():
    net = Network([np.ones((1, 2))], loss="mse")
    cfg = optim.OptimizerConfig(kind="sgd", lr=0.1, weight_decay=0.5)
    p = optim.make_optimizer(cfg, net).propose(net, np.zeros((2, 1)), np.zeros((1, 1)))
    np.testing.assert_allclose(p.updates[0], -0.1 * 0.5 * np.ones((1, 2)))
