import numpy as np
import pytest

from hjbfl.core_types import ConfigurationError, ProblemSpec
from hjbfl.value_models import (SIN_PLUS_COS, ResidualNetModel, feedback,
                                feedback_dy, feedback_full, load_theta,
                                resnet_param_count, save_theta)


# -- activation ---------------------------------------------------------------

def test_activation_values():
    assert SIN_PLUS_COS(0.0) == pytest.approx(1.0, abs=0.0)
    assert SIN_PLUS_COS.deriv(0.0, 1) == pytest.approx(1.0, abs=0.0)


def test_activation_second_derivative_identity():
    x = np.linspace(-4, 4, 41)
    assert np.max(np.abs(SIN_PLUS_COS.deriv(x, 2) + SIN_PLUS_COS(x))) <= 1e-14
    # fourth derivative closes the cycle
    assert np.max(np.abs(SIN_PLUS_COS.deriv(x, 4) - SIN_PLUS_COS(x))) <= 1e-14


def test_activation_derivatives_fd():
    x = np.linspace(-2, 2, 9)
    h = 1e-6
    for k in range(4):
        fd = (SIN_PLUS_COS.deriv(x + h, k) - SIN_PLUS_COS.deriv(x - h, k)) / (2 * h)
        assert np.max(np.abs(fd - SIN_PLUS_COS.deriv(x, k + 1))) < 1e-9


# -- residual network ----------------------------------------------------------

def _model(n=3, hidden=(7,), alpha=0.25, seed=0):
    rng = np.random.default_rng(seed)
    Q2 = np.eye(n)
    y_dT = rng.normal(size=n)
    return ResidualNetModel((n + 1, *hidden, 1), T=2.0, n=n, alpha=alpha,
                            Q2=Q2, y_dT=y_dT), rng


def test_paper_architecture_param_count():
    model = ResidualNetModel((11, 60, 1), T=2.0, n=10, alpha=0.25,
                             Q2=np.eye(10), y_dT=np.zeros(10))
    assert model.n_params == 1440
    assert resnet_param_count((11, 60, 1)) == 60 * 11 + 60 * 11 + 60 + 60


def test_terminal_condition_exact():
    model, rng = _model()
    for _ in range(50):
        theta = rng.normal(size=model.n_params)
        y = rng.normal(size=3) * 3
        v = model.value(theta, model.T, y)
        head = 0.5 * model.alpha * float(np.sum((y - model.y_dT) ** 2))
        assert abs(v - head) <= 1e-12 * (1.0 + abs(v))


@pytest.mark.parametrize("hidden", [(7,), (6, 5)])
def test_resnet_derivatives_match_fd(hidden):
    model, rng = _model(hidden=hidden)
    n = model.n
    theta = rng.normal(size=model.n_params) * 0.5
    h = 1e-6
    for _ in range(4):
        t = rng.uniform(0, 2.0)
        y = rng.normal(size=n)
        ev = model.eval_all(theta, t, y)
        fd_gy = np.array([
            (model.value(theta, t, y + h * e) - model.value(theta, t, y - h * e)) / (2 * h)
            for e in np.eye(n)])
        assert np.max(np.abs(fd_gy - ev.grad_y)) <= 1e-6 * (1 + np.max(np.abs(fd_gy)))
        fd_h = np.stack([
            (model.eval_all(theta, t, y + h * e).grad_y
             - model.eval_all(theta, t, y - h * e).grad_y) / (2 * h)
            for e in np.eye(n)], axis=1)
        assert np.max(np.abs(fd_h - ev.hess_yy)) <= 1e-6 * (1 + np.max(np.abs(fd_h)))
        assert np.max(np.abs(ev.hess_yy - ev.hess_yy.T)) <= 1e-10
        for i in rng.choice(model.n_params, 12, replace=False):
            e = np.zeros(model.n_params)
            e[i] = h
            fd_th = (model.value(theta + e, t, y) - model.value(theta - e, t, y)) / (2 * h)
            assert abs(fd_th - ev.grad_theta[i]) <= 1e-6 * (1 + abs(fd_th))
            fd_mix = (model.eval_all(theta + e, t, y).grad_y
                      - model.eval_all(theta - e, t, y).grad_y) / (2 * h)
            assert np.max(np.abs(fd_mix - ev.grad_y_theta[:, i])) <= 1e-6 * (
                1 + np.max(np.abs(fd_mix)))


def test_batched_paths_agree_with_pointwise():
    model, rng = _model(hidden=(5, 4))
    theta = rng.normal(size=model.n_params) * 0.4
    ts = rng.uniform(0, 2, 6)
    Y = rng.normal(size=(6, 3))
    mc = model.eval_nodes(theta, ts, Y)
    V, vy, vyy = model.eval_nodes_x(theta, ts, Y)
    V2, vy2 = model.value_grad_y_batch(theta, ts, Y)
    for k in range(6):
        ev = model.eval_all(theta, ts[k], Y[k])
        assert mc.value[k] == pytest.approx(ev.value, rel=1e-13)
        assert np.allclose(mc.grad_y[k], ev.grad_y, atol=1e-13)
        assert np.allclose(mc.hess_yy[k], ev.hess_yy, atol=1e-13)
    assert np.allclose(V, mc.value) and np.allclose(vy, mc.grad_y)
    assert np.allclose(vyy, mc.hess_yy)
    assert np.allclose(V2, mc.value) and np.allclose(vy2, mc.grad_y)


def test_theta_vjp_matches_materialized():
    for hidden in ((7,), (6, 5)):
        model, rng = _model(hidden=hidden)
        theta = rng.normal(size=model.n_params) * 0.4
        ts = rng.uniform(0, 2, 5)
        Y = rng.normal(size=(5, 3))
        wv = rng.normal(size=5)
        wg = rng.normal(size=(5, 3))
        fast = model.theta_vjp(theta, ts, Y, wv, wg)
        mc = model.eval_nodes(theta, ts, Y)
        slow = (np.einsum("kp,k->p", mc.grad_theta, wv)
                + np.einsum("kjp,kj->p", mc.grad_y_theta, wg))
        assert np.max(np.abs(fast - slow)) <= 1e-12 * (1 + np.max(np.abs(slow)))


def test_default_theta_scaling():
    model, rng = _model(hidden=(8,))
    theta = model.default_theta(rng)
    sl = model.block_slices()
    assert np.max(np.abs(theta[sl["W1_1"]])) <= 1.0 / np.sqrt(4)
    assert np.all(theta[sl["b1"]] == 0.0)


def test_arch_validation():
    with pytest.raises(ConfigurationError):
        ResidualNetModel((4, 5, 2), T=1.0, n=3, alpha=1.0, Q2=np.eye(3), y_dT=np.zeros(3))
    with pytest.raises(ConfigurationError):
        ResidualNetModel((3, 5, 1), T=1.0, n=3, alpha=1.0, Q2=np.eye(3), y_dT=np.zeros(3))
    with pytest.raises(ConfigurationError):
        ResidualNetModel((4, 5, 5, 5, 5, 1), T=1.0, n=3, alpha=1.0,
                         Q2=np.eye(3), y_dT=np.zeros(3))


# -- feedback law ---------------------------------------------------------------

def _feedback_spec(n, m, rng):
    G = rng.normal(size=(n, m))
    return ProblemSpec(
        n=n, m=m, T=2.0, beta=0.7, alpha=0.25, Q1=np.eye(n), Q2=np.eye(n),
        y_d=lambda t: np.zeros(n), y_dT=np.zeros(n),
        f=lambda t, y: np.zeros(n),
        g=lambda t, y: G * (1.0 + 0.1 * float(y[0])),
        Df=lambda t, y: np.zeros((n, n)),
        Dg=lambda t, y: 0.1 * G[:, :, None] * np.eye(n)[0][None, None, :],
    )


def test_feedback_zero_gradient():
    rng = np.random.default_rng(1)
    n = 3
    spec = _feedback_spec(n, 2, rng)
    # alpha = 0 head and zero network -> dV/dy = 0 -> F = 0
    model = ResidualNetModel((n + 1, 5, 1), T=2.0, n=n, alpha=0.0,
                             Q2=np.eye(n), y_dT=np.zeros(n))
    theta = np.zeros(model.n_params)
    u = feedback(spec, model, theta, 0.3, rng.normal(size=n))
    assert np.allclose(u, 0.0)


def test_feedback_lq_identity():
    # g = I, beta = 1, V = |y|^2 / 2  ->  F = -y
    n = 2
    spec = ProblemSpec(
        n=n, m=n, T=1.0, beta=1.0, alpha=1.0, Q1=np.eye(n), Q2=np.eye(n),
        y_d=lambda t: np.zeros(n), y_dT=np.zeros(n),
        f=lambda t, y: np.zeros(n), g=lambda t, y: np.eye(n),
        Df=lambda t, y: np.zeros((n, n)), Dg=lambda t, y: np.zeros((n, n, n)),
    )
    model = ResidualNetModel((n + 1, 4, 1), T=1.0, n=n, alpha=1.0,
                             Q2=np.eye(n), y_dT=np.zeros(n))
    theta = np.zeros(model.n_params)    # value reduces to the quadratic head
    y = np.array([0.4, -1.3])
    assert np.allclose(feedback(spec, model, theta, 0.2, y), -y, atol=1e-14)


def test_feedback_theta_jacobian_fd():
    rng = np.random.default_rng(2)
    n, m = 3, 2
    spec = _feedback_spec(n, m, rng)
    model = ResidualNetModel((n + 1, 6, 1), T=2.0, n=n, alpha=0.25,
                             Q2=np.eye(n), y_dT=np.zeros(n))
    theta = rng.normal(size=model.n_params) * 0.5
    t, y = 0.7, rng.normal(size=n)
    F, DyF, DthF = feedback_full(spec, model, theta, t, y)
    h = 1e-6
    for i in rng.choice(model.n_params, 10, replace=False):
        e = np.zeros(model.n_params)
        e[i] = h
        fd = (feedback(spec, model, theta + e, t, y)
              - feedback(spec, model, theta - e, t, y)) / (2 * h)
        assert np.max(np.abs(fd - DthF[:, i])) <= 1e-6 * (1 + np.max(np.abs(fd)))
    for e in np.eye(n):
        fd = (feedback(spec, model, theta, t, y + h * e)
              - feedback(spec, model, theta, t, y - h * e)) / (2 * h)
        assert np.max(np.abs(fd - DyF @ e)) <= 1e-6 * (1 + np.max(np.abs(fd)))
    F2, DyF2 = feedback_dy(spec, model, theta, t, y)
    assert np.allclose(F, F2) and np.allclose(DyF, DyF2)


# -- persistence ------------------------------------------------------------------

def test_theta_json_roundtrip(tmp_path):
    model, rng = _model()
    theta = rng.normal(size=model.n_params)
    path = tmp_path / "theta.json"
    save_theta(path, model, theta)
    back = load_theta(path, model)
    assert np.array_equal(back, theta)
    other = ResidualNetModel((4, 9, 1), T=2.0, n=3, alpha=0.25,
                             Q2=np.eye(3), y_dT=np.zeros(3))
    with pytest.raises(ConfigurationError):
        load_theta(path, other)
