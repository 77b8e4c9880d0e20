import numpy as np
import pytest

from hjbfl.core_types import (AdjointTrajectory, ControlTrajectory,
                              CostateTrajectory, ProblemSpec, StateTrajectory,
                              make_uniform_grid, trapezoid)
from hjbfl.ode_solvers import (ClosedLoopOperatorA, NodeData,
                               integrate_adjoint, integrate_closed_loop,
                               integrate_closed_loop_ensemble,
                               integrate_controlled, integrate_costate_kappa,
                               integrate_costate_zeta, integrate_sensitivity)
from hjbfl.value_models import ResidualNetModel


def _zero_model(n, T=1.0, alpha=0.0):
    return ResidualNetModel((n + 1, 3, 1), T=T, n=n, alpha=alpha,
                            Q2=np.zeros((n, n)) if alpha == 0.0 else np.eye(n),
                            y_dT=np.zeros(n))


def _decay_spec(n=1, T=1.0):
    return ProblemSpec(
        n=n, m=1, T=T, beta=1.0, alpha=0.0, Q1=np.zeros((n, n)),
        Q2=np.zeros((n, n)), y_d=lambda t: np.zeros(n), y_dT=np.zeros(n),
        f=lambda t, y: -y, g=lambda t, y: np.zeros((n, 1)),
        Df=lambda t, y: -np.eye(n), Dg=lambda t, y: np.zeros((n, 1, n)),
    )


def test_zero_dynamics_constant_solution():
    n = 2
    spec = ProblemSpec(
        n=n, m=1, T=1.0, beta=1.0, alpha=0.0, Q1=np.zeros((n, n)),
        Q2=np.zeros((n, n)), y_d=lambda t: np.zeros(n), y_dT=np.zeros(n),
        f=lambda t, y: np.zeros(n), g=lambda t, y: np.zeros((n, 1)),
        Df=lambda t, y: np.zeros((n, n)), Dg=lambda t, y: np.zeros((n, 1, n)),
    )
    model = _zero_model(n)
    y0 = np.array([1.5, -2.0])
    grid = make_uniform_grid(1.0, 20)
    y = integrate_closed_loop(spec, model, np.zeros(model.n_params), y0, grid)
    assert np.allclose(y.values, y0[None, :], atol=1e-12)


@pytest.mark.parametrize("method,min_order", [("euler", 1), ("radau3", 3)])
def test_exponential_decay_orders(method, min_order):
    spec = _decay_spec()
    model = _zero_model(1)
    theta = np.zeros(model.n_params)
    errs = []
    for ns in (10, 20, 40):
        grid = make_uniform_grid(1.0, ns)
        y = integrate_closed_loop(spec, model, theta, np.array([1.0]), grid,
                                  method=method)
        errs.append(abs(y.values[-1, 0] - np.exp(-1.0)))
    rate = np.log2(errs[0] / errs[1])
    assert rate >= min_order - 0.25
    assert errs[0] <= 0.05 if method == "euler" else errs[0] <= 1e-6


def test_euler_self_convergence_factor():
    # halving h reduces the error vs a 4x-fine reference by >= 1.8
    spec = _decay_spec()
    model = _zero_model(1)
    theta = np.zeros(model.n_params)
    ref = integrate_closed_loop(spec, model, theta, np.array([1.0]),
                                make_uniform_grid(1.0, 160), method="euler")
    errs = []
    for ns in (20, 40):
        y = integrate_closed_loop(spec, model, theta, np.array([1.0]),
                                  make_uniform_grid(1.0, ns), method="euler")
        stride = 160 // ns
        errs.append(np.max(np.abs(y.values[:, 0] - ref.values[::stride, 0])))
    assert errs[0] / errs[1] >= 1.8


def _bilinear_small():
    from hjbfl.bilinear_benchmark import assemble, dynamics_callbacks
    bspec = assemble(4)
    spec = dynamics_callbacks(bspec)
    model = ResidualNetModel.for_problem(spec, hidden=(8,))
    theta = model.default_theta(np.random.default_rng(7))
    return spec, model, theta, bspec


def test_closed_loop_self_convergence_radau():
    # nonzero feedback: compare against a halved-step reference solve
    spec, model, theta, bspec = _bilinear_small()
    y0 = bspec.Ybar0
    sol = {}
    for ns in (25, 50, 100):
        grid = make_uniform_grid(spec.T, ns)
        sol[ns] = integrate_closed_loop(spec, model, theta, y0, grid)
    e25 = np.max(np.abs(sol[25].values[-1] - sol[100].values[-1]))
    e50 = np.max(np.abs(sol[50].values[-1] - sol[100].values[-1]))
    assert e25 / max(e50, 1e-16) >= 2.0 ** 3   # at least third order observed
    assert e50 <= 1e-6


def test_ensemble_solver_matches_single():
    spec, model, theta, bspec = _bilinear_small()
    rng = np.random.default_rng(3)
    Y0s = bspec.Ybar0[None, :] + 0.3 * rng.standard_normal((3, 4))
    grid = make_uniform_grid(spec.T, 40)
    batch = integrate_closed_loop_ensemble(spec, model, theta, Y0s, grid)
    for i in range(3):
        single = integrate_closed_loop(spec, model, theta, Y0s[i], grid)
        assert np.max(np.abs(single.values - batch[i].values)) <= 1e-8


def test_adjoint_zero_weights():
    spec, model, theta, bspec = _bilinear_small()
    spec0 = ProblemSpec(
        n=spec.n, m=spec.m, T=spec.T, beta=spec.beta, alpha=0.0,
        Q1=np.zeros((spec.n, spec.n)), Q2=np.zeros((spec.n, spec.n)),
        y_d=spec.y_d, y_dT=spec.y_dT, f=spec.f, g=spec.g, Df=spec.Df, Dg=spec.Dg)
    grid = make_uniform_grid(spec.T, 30)
    y = integrate_closed_loop(spec0, model, theta, bspec.Ybar0, grid)
    p = integrate_adjoint(spec0, model, theta, y)
    assert np.allclose(p.values, 0.0, atol=1e-14)


def test_adjoint_constant_solution():
    # frozen state y = 2, zero dynamics, Q1 = 0, Q2 = 1, alpha = 1 -> p = 2
    n = 1
    spec = ProblemSpec(
        n=n, m=1, T=1.0, beta=1.0, alpha=1.0, Q1=np.zeros((1, 1)), Q2=np.eye(1),
        y_d=lambda t: np.zeros(1), y_dT=np.zeros(1),
        f=lambda t, y: np.zeros(1), g=lambda t, y: np.zeros((1, 1)),
        Df=lambda t, y: np.zeros((1, 1)), Dg=lambda t, y: np.zeros((1, 1, 1)),
    )
    model = _zero_model(1, alpha=1.0)
    grid = make_uniform_grid(1.0, 25)
    y = StateTrajectory(grid, np.full((grid.n_nodes, 1), 2.0))
    p = integrate_adjoint(spec, model, np.zeros(model.n_params), y)
    assert np.allclose(p.values, 2.0, atol=1e-13)


def test_adjoint_self_convergence():
    spec, model, theta, bspec = _bilinear_small()
    ref_grid = make_uniform_grid(spec.T, 400)
    y_ref = integrate_closed_loop(spec, model, theta, bspec.Ybar0, ref_grid)
    p_ref = integrate_adjoint(spec, model, theta, y_ref, lin_method="euler")
    errs = []
    for ns in (50, 100):
        grid = make_uniform_grid(spec.T, ns)
        y = integrate_closed_loop(spec, model, theta, bspec.Ybar0, grid)
        p = integrate_adjoint(spec, model, theta, y, lin_method="euler")
        stride = 400 // ns
        errs.append(np.max(np.abs(p.values - p_ref.values[::stride])))
    assert errs[0] / errs[1] >= 1.8   # first order at least


def test_costate_kappa_trivial_and_pure_integration():
    spec, model, theta, bspec = _bilinear_small()
    grid = make_uniform_grid(spec.T, 30)
    y = integrate_closed_loop(spec, model, theta, bspec.Ybar0, grid)
    zero_hat = np.zeros((grid.n_nodes, spec.n))
    kappa = integrate_costate_kappa(spec, model, theta, y, zero_hat)
    assert np.allclose(kappa.values, 0.0, atol=1e-15)

    # A == 0 (zero dynamics spec), constant p_hat = c -> kappa(t) = c t
    n = 2
    spec0 = ProblemSpec(
        n=n, m=1, T=1.0, beta=1.0, alpha=0.0, Q1=np.zeros((n, n)),
        Q2=np.zeros((n, n)), y_d=lambda t: np.zeros(n), y_dT=np.zeros(n),
        f=lambda t, y: np.zeros(n), g=lambda t, y: np.zeros((n, 1)),
        Df=lambda t, y: np.zeros((n, n)), Dg=lambda t, y: np.zeros((n, 1, n)),
    )
    model0 = _zero_model(n)
    g0 = make_uniform_grid(1.0, 40)
    y0 = StateTrajectory(g0, np.zeros((g0.n_nodes, n)))
    c = np.array([0.7, -0.2])
    kappa = integrate_costate_kappa(spec0, model0, np.zeros(model0.n_params),
                                    y0, np.tile(c, (g0.n_nodes, 1)))
    assert np.max(np.abs(kappa.values - g0.nodes[:, None] * c)) <= 1e-12


def test_costate_zeta_trivial_and_terminal_propagation():
    n = 2
    spec0 = ProblemSpec(
        n=n, m=1, T=1.0, beta=1.0, alpha=0.0, Q1=np.zeros((n, n)),
        Q2=np.zeros((n, n)), y_d=lambda t: np.zeros(n), y_dT=np.zeros(n),
        f=lambda t, y: np.zeros(n), g=lambda t, y: np.zeros((n, 1)),
        Df=lambda t, y: np.zeros((n, n)), Dg=lambda t, y: np.zeros((n, 1, n)),
    )
    model0 = _zero_model(n)
    theta0 = np.zeros(model0.n_params)
    g0 = make_uniform_grid(1.0, 30)
    y = StateTrajectory(g0, np.zeros((g0.n_nodes, n)))
    p = AdjointTrajectory(g0, np.zeros((g0.n_nodes, n)))
    kappa = CostateTrajectory(g0, np.zeros((g0.n_nodes, n)))
    zeros = np.zeros((g0.n_nodes, n))
    zeta = integrate_costate_zeta(spec0, model0, theta0, y, p, kappa,
                                  zeros, np.zeros(n))
    assert np.allclose(zeta.values, 0.0, atol=1e-15)
    # terminal source e1 propagates backward through homogeneous flow
    zeta = integrate_costate_zeta(spec0, model0, theta0, y, p, kappa,
                                  zeros, np.array([1.0, 0.0]))
    assert np.allclose(zeta.values[-1], [1.0, 0.0], atol=0.0)
    assert np.allclose(zeta.values, np.array([1.0, 0.0])[None, :], atol=1e-13)


def test_sensitivity_zero_direction_and_linearity():
    spec, model, theta, bspec = _bilinear_small()
    grid = make_uniform_grid(spec.T, 30)
    y = integrate_closed_loop(spec, model, theta, bspec.Ybar0, grid)
    p = integrate_adjoint(spec, model, theta, y)
    dY, dP = integrate_sensitivity(spec, model, theta,
                                   np.zeros(model.n_params), y, p)
    assert np.allclose(dY.values, 0.0, atol=1e-15)
    assert np.allclose(dP.values, 0.0, atol=1e-15)

    rng = np.random.default_rng(5)
    d = rng.standard_normal(model.n_params)
    dY1, dP1 = integrate_sensitivity(spec, model, theta, d, y, p)
    dY2, dP2 = integrate_sensitivity(spec, model, theta, 2.5 * d, y, p)
    assert np.allclose(dY2.values, 2.5 * dY1.values, rtol=1e-12, atol=1e-14)
    assert np.allclose(dP2.values, 2.5 * dP1.values, rtol=1e-12, atol=1e-14)


def test_sensitivity_matches_fd():
    spec, model, theta, bspec = _bilinear_small()
    grid = make_uniform_grid(spec.T, 100)
    y = integrate_closed_loop(spec, model, theta, bspec.Ybar0, grid)
    p = integrate_adjoint(spec, model, theta, y)
    rng = np.random.default_rng(6)
    d = rng.standard_normal(model.n_params)
    d /= np.linalg.norm(d)
    dY, _ = integrate_sensitivity(spec, model, theta, d, y, p)
    h = 1e-5
    yp = integrate_closed_loop(spec, model, theta + h * d, bspec.Ybar0, grid)
    ym = integrate_closed_loop(spec, model, theta - h * d, bspec.Ybar0, grid)
    fd = (yp.values - ym.values) / (2 * h)
    scale = max(1.0, np.max(np.abs(fd)))
    assert np.max(np.abs(fd - dY.values)) <= 2e-3 * scale


def _pairing_terms(spec, model, theta, y, p, grid, rng):
    """Both sides of the costate pairing identity for random sources."""
    K = grid.n_nodes
    n = spec.n
    y_hat = rng.standard_normal((K, n))
    y_hatT = rng.standard_normal(n)
    p_hat = rng.standard_normal((K, n))
    dtheta = rng.standard_normal(model.n_params)
    dtheta /= np.linalg.norm(dtheta)

    nd = NodeData(spec, model, theta, y)
    dY, dP = integrate_sensitivity(spec, model, theta, dtheta, y, p, node_data=nd)
    kappa = integrate_costate_kappa(spec, model, theta, y, p_hat, node_data=nd)
    zeta = integrate_costate_zeta(spec, model, theta, y, p, kappa, y_hat,
                                  y_hatT, node_data=nd)

    lhs = (float(trapezoid(np.einsum("ki,ki->k", y_hat, dY.values), grid))
           + float(y_hatT @ dY.values[-1])
           + float(trapezoid(np.einsum("ki,ki->k", p_hat, dP.values), grid)))

    mc = model.eval_nodes(theta, grid.nodes, y.values)
    w = (np.einsum("kjm,kj->km", nd.g, zeta.values)
         + np.einsum("kjmq,kq,kj->km", nd.Dg, kappa.values, p.values))
    gw = np.einsum("kjm,km->kj", nd.g, w)
    integrand = -(1.0 / spec.beta) * np.einsum("kjp,kj->kp", mc.grad_y_theta, gw)
    rhs = float(trapezoid(integrand, grid) @ dtheta)
    return lhs, rhs


def test_costate_pairing_identity_two_state_toy():
    # the identity holds exactly in continuous time; discrete gap shrinks with h
    n, m = 2, 1
    spec = ProblemSpec(
        n=n, m=m, T=1.0, beta=0.5, alpha=0.7, Q1=np.eye(n), Q2=np.eye(n),
        y_d=lambda t: np.array([np.sin(t), 0.1]), y_dT=np.array([0.0, 0.1]),
        f=lambda t, y: np.array([-y[0] + 0.2 * y[1] ** 2, -0.5 * y[1]]),
        g=lambda t, y: np.array([[0.0], [1.0 + 0.3 * y[0]]]),
        Df=lambda t, y: np.array([[-1.0, 0.4 * y[1]], [0.0, -0.5]]),
        Dg=lambda t, y: np.array([[[0.0, 0.0]], [[0.3, 0.0]]]),
        Dyyf=lambda t, y: np.array([[[0.0, 0.0], [0.0, 0.4]],
                                    [[0.0, 0.0], [0.0, 0.0]]]),
        Dyyg=lambda t, y: np.zeros((2, 1, 2, 2)),
    )
    model = ResidualNetModel((n + 1, 5, 1), T=1.0, n=n, alpha=0.7,
                             Q2=np.eye(n), y_dT=spec.y_dT)
    theta = model.default_theta(np.random.default_rng(0))
    gaps = []
    for ns in (100, 200):
        grid = make_uniform_grid(1.0, ns)
        y = integrate_closed_loop(spec, model, theta, np.array([0.8, -0.4]), grid)
        p = integrate_adjoint(spec, model, theta, y)
        rng = np.random.default_rng(42)
        lhs, rhs = _pairing_terms(spec, model, theta, y, p, grid, rng)
        gaps.append(abs(lhs - rhs) / (1.0 + abs(lhs) + abs(rhs)))
    assert gaps[1] <= 1e-3
    assert gaps[0] / gaps[1] >= 1.5    # decays under refinement


def test_operator_a_matches_node_data():
    spec, model, theta, bspec = _bilinear_small()
    grid = make_uniform_grid(spec.T, 20)
    y = integrate_closed_loop(spec, model, theta, bspec.Ybar0, grid)
    nd = NodeData(spec, model, theta, y)
    op = ClosedLoopOperatorA(spec, model, theta)
    for k in (0, 7, 20):
        A = op.matrix(grid.nodes[k], y.values[k])
        assert np.allclose(A, nd.A[k], atol=1e-12)


def test_controlled_integration_matches_closed_loop():
    # feeding the feedback controls back as open-loop data reproduces the state
    spec, model, theta, bspec = _bilinear_small()
    grid = make_uniform_grid(spec.T, 200)
    y = integrate_closed_loop(spec, model, theta, bspec.Ybar0, grid)
    nd = NodeData(spec, model, theta, y)
    u = ControlTrajectory(grid, nd.F)
    y2 = integrate_controlled(spec, u, bspec.Ybar0, grid)
    assert np.max(np.abs(y.values - y2.values)) <= 5e-4   # interpolation gap only
