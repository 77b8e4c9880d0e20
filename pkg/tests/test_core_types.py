import numpy as np
import pytest

from hjbfl.core_types import (ConfigurationError, ContractError, EnsembleSet,
                              PenaltyConfig, ProblemSpec, StateTrajectory,
                              Trajectory, cumtrapz_backward, cumtrapz_forward,
                              make_uniform_grid, trapezoid)


def test_uniform_grid_nodes():
    g = make_uniform_grid(2.0, 4)
    assert np.array_equal(g.nodes, [0.0, 0.5, 1.0, 1.5, 2.0])
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 2.0


def test_degenerate_grid():
    g = make_uniform_grid(2.0, 1)
    assert np.array_equal(g.nodes, [0.0, 2.0])


def test_grid_spacing_accumulation():
    g = make_uniform_grid(2.0, 200)
    assert g.n_nodes == 201
    assert g.h == pytest.approx(0.01, abs=0.0)
    assert abs(g.h * g.n_steps - g.T) <= np.finfo(float).eps * g.T
    assert np.all(np.diff(g.nodes) > 0)


def test_grid_rejects_bad_inputs():
    with pytest.raises(ConfigurationError):
        make_uniform_grid(0.0, 4)
    with pytest.raises(ConfigurationError):
        make_uniform_grid(-1.0, 4)
    with pytest.raises(ConfigurationError):
        make_uniform_grid(1.0, 0)


def test_trapezoid_matches_numpy():
    g = make_uniform_grid(1.5, 37)
    vals = np.sin(g.nodes) + 0.3 * g.nodes
    assert trapezoid(vals, g) == pytest.approx(np.trapezoid(vals, g.nodes), rel=1e-14)


def test_cumtrapz_endpoints():
    g = make_uniform_grid(1.0, 50)
    vals = np.cos(g.nodes)
    fw = cumtrapz_forward(vals, g)
    bw = cumtrapz_backward(vals, g)
    assert fw[0] == 0.0 and bw[-1] == 0.0
    assert fw[-1] == pytest.approx(trapezoid(vals, g), rel=1e-14)
    assert np.allclose(fw + bw, fw[-1], atol=1e-14)


def test_trajectory_csv_roundtrip_bit_identical(tmp_path):
    g = make_uniform_grid(2.0, 17)
    rng = np.random.default_rng(0)
    vals = rng.standard_normal((g.n_nodes, 3)) * np.array([1e-8, 1.0, 1e8])
    tr = StateTrajectory(g, vals)
    path = tmp_path / "traj.csv"
    tr.to_csv(path)
    back = StateTrajectory.from_csv(path)
    assert np.array_equal(back.values, tr.values)
    assert np.array_equal(back.grid.nodes, tr.grid.nodes)


def test_trajectory_shape_checks():
    g = make_uniform_grid(1.0, 4)
    with pytest.raises(ContractError):
        Trajectory(g, np.zeros((3, 2)))
    with pytest.raises(ContractError):
        Trajectory(g, np.full((5, 2), np.nan))


def _tiny_spec(**kw):
    base = dict(
        n=2, m=1, T=1.0, beta=1.0, alpha=1.0, Q1=np.eye(2), Q2=np.eye(2),
        y_d=lambda t: np.zeros(2), y_dT=np.zeros(2),
        f=lambda t, y: np.zeros(2), g=lambda t, y: np.zeros((2, 1)),
        Df=lambda t, y: np.zeros((2, 2)), Dg=lambda t, y: np.zeros((2, 1, 2)),
    )
    base.update(kw)
    return ProblemSpec(**base)


def test_problem_spec_validation():
    _tiny_spec()  # valid
    with pytest.raises(ConfigurationError):
        _tiny_spec(beta=0.0)
    with pytest.raises(ConfigurationError):
        _tiny_spec(alpha=-0.1)
    with pytest.raises(ConfigurationError):
        _tiny_spec(Q1=np.array([[0.0, 1.0], [0.0, 0.0]]))      # not symmetric
    with pytest.raises(ConfigurationError):
        _tiny_spec(Q2=np.array([[-1.0, 0.0], [0.0, 1.0]]))     # indefinite


def test_penalty_config_validation():
    PenaltyConfig(gamma1=0.0, gamma2=0.0, gamma_eps=0.0)
    with pytest.raises(ConfigurationError):
        PenaltyConfig(gamma1=-1.0)
    with pytest.raises(ConfigurationError):
        PenaltyConfig(phi_terminal="bogus")


def test_ensemble_weights_and_ball():
    pts = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.2]])
    ens = EnsembleSet(points=pts, weights=[0.5, 0.5, 1.0],
                      tags=("train", "train", "validation"), seed=1,
                      center=np.zeros(2), radius=1.0)
    idx, p, w = ens.split("train")
    assert list(idx) == [0, 1] and np.allclose(w, 0.5)
    with pytest.raises(ConfigurationError):
        EnsembleSet(points=pts, weights=[0.6, 0.5, 1.0],
                    tags=("train", "train", "validation"), seed=1)
    with pytest.raises(ConfigurationError):
        EnsembleSet(points=pts, weights=[0.5, 0.5, 1.0],
                    tags=("train", "train", "validation"), seed=1,
                    center=np.zeros(2), radius=0.1)
