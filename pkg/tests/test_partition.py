import numpy as np
import pytest

from hjbfl.core_types import CapabilityError
from hjbfl.value_models import build_partition, taylor_init


def _quadratic_reference(T, alpha, n, coeffs):
    """Globally quadratic V with the required terminal structure.

    V(t, y) = (alpha/2)|y|^2 + (T - t)(a + b.y + c t) is quadratic in (t, y)
    and satisfies V(T, y) = (alpha/2)|y|^2.
    """
    a0, bv, c0 = coeffs

    def value(t, y):
        y = np.asarray(y)
        return 0.5 * alpha * float(y @ y) + (T - t) * (a0 + bv @ y + c0 * t)

    def grad(t, y):
        y = np.asarray(y)
        gt = -(a0 + bv @ y + c0 * t) + (T - t) * c0
        return np.concatenate([[gt], (T - t) * bv + alpha * y])

    def hess(t, y):
        H = np.zeros((n + 1, n + 1))
        H[0, 0] = -2.0 * c0
        H[0, 1:] = -bv
        H[1:, 0] = -bv
        H[1:, 1:] = alpha * np.eye(n)
        return H

    return value, grad, hess


def test_dimension_guard():
    with pytest.raises(CapabilityError):
        build_partition(0.5, 0, 1.0, T=1.0, record_bounds=False)
    with pytest.raises(CapabilityError):
        build_partition(0.5, 4, 1.0, T=1.0, record_bounds=False)


def test_partition_of_unity_sums_to_one():
    part = build_partition(0.4, 1, 1.0, T=1.0, record_bounds=False)
    axes = [np.linspace(-1.0, 1.0, 41)] * 2
    S_all, S_int, _ = part.lattice_sums(axes)
    assert np.min(S_all) > 0.0
    assert np.max(np.abs(S_int / S_all - 1.0)) <= 1e-12


def test_overlap_bound_recorded_and_respected():
    part = build_partition(0.4, 2, 1.0, T=1.0)
    assert part.overlap_bound is not None
    axes = [np.linspace(-1.0, 1.0, 17)] * 3
    _, _, count = part.lattice_sums(axes)
    assert count.max() <= part.overlap_bound
    assert count.max() <= 2 ** 3   # barycenter lattice geometry


def test_support_radius():
    part = build_partition(0.5, 1, 1.0, T=1.0, record_bounds=False)
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = rng.uniform(-1.0, 1.0, 2)
        ords, phi = part.phi_at(x)
        centers = part.interior_centers[ords]
        d = np.linalg.norm(x - centers, axis=1)
        assert np.all(d < part.r_eps)
        assert np.all(phi >= 0.0) and phi.sum() == pytest.approx(1.0, abs=1e-12)


def test_derivative_scaling_stable_across_eps():
    sup1, sup2 = [], []
    for eps in (0.4, 0.2, 0.1):
        part = build_partition(eps, 1, 1.0, T=1.0)
        sup1.append(part.derivative_bound)          # ||Dphi|| * eps
        sup2.append(part.second_derivative_bound)   # ||D2phi|| * eps^2
    assert max(sup1) / min(sup1) <= 3.0
    assert max(sup2) / min(sup2) <= 3.0


def test_taylor_exactness_on_quadratics():
    n = 2
    part = build_partition(0.4, n, 1.0, T=1.0, alpha=0.5, record_bounds=False)
    value, grad, hess = _quadratic_reference(1.0, 0.5, n, (0.7, np.array([0.3, -0.2]), 0.15))
    theta = taylor_init(part, value, grad, hess)
    rng = np.random.default_rng(1)
    for _ in range(40):
        t = rng.uniform(0.0, 1.0)
        y = rng.uniform(-0.9, 0.9, n)
        assert abs(part.value(theta, t, y) - value(t, y)) <= 1e-10


def _smooth_reference(T, alpha):
    """Smooth non-polynomial V (n = 2) with the required terminal structure.

    V = (alpha/2)|y|^2 + (T - t) sin(0.8 y0 + 0.3 t) + 0.5 (T - t)^2 cos(0.5 y1)
    """
    def value(t, y):
        y = np.asarray(y)
        return (0.5 * alpha * float(y @ y)
                + (T - t) * np.sin(0.8 * y[0] + 0.3 * t)
                + 0.5 * (T - t) ** 2 * np.cos(0.5 * y[1]))

    def grad(t, y):
        s = np.sin(0.8 * y[0] + 0.3 * t)
        c = np.cos(0.8 * y[0] + 0.3 * t)
        return np.array([
            -s + 0.3 * (T - t) * c - (T - t) * np.cos(0.5 * y[1]),
            alpha * y[0] + 0.8 * (T - t) * c,
            alpha * y[1] - 0.25 * (T - t) ** 2 * np.sin(0.5 * y[1]),
        ])

    def hess(t, y):
        s = np.sin(0.8 * y[0] + 0.3 * t)
        c = np.cos(0.8 * y[0] + 0.3 * t)
        H = np.zeros((3, 3))
        H[0, 0] = -0.6 * c - 0.09 * (T - t) * s + np.cos(0.5 * y[1])
        H[0, 1] = H[1, 0] = -0.8 * c + 0.24 * (T - t) * (-s)
        H[0, 2] = H[2, 0] = 0.5 * (T - t) * np.sin(0.5 * y[1])
        H[1, 1] = alpha - 0.64 * (T - t) * s
        H[2, 2] = alpha - 0.125 * (T - t) ** 2 * np.cos(0.5 * y[1])
        return H

    return value, grad, hess


@pytest.mark.slow
def test_taylor_surrogate_convergence_orders():
    # sup-norm errors of value / gradient / Hessian drop at orders 3 / 2 / 1
    n = 2
    T = 1.0
    value, grad, hess = _smooth_reference(T, 0.5)
    rng = np.random.default_rng(2)
    probes = [(rng.uniform(0, T), rng.uniform(-0.7, 0.7, n)) for _ in range(60)]
    errs = {"v": [], "g": [], "h": []}
    for eps in (0.4, 0.2, 0.1):
        part = build_partition(eps, n, 1.0, T=T, alpha=0.5, record_bounds=False)
        theta = taylor_init(part, value, grad, hess)
        ev, eg, eh = 0.0, 0.0, 0.0
        for t, y in probes:
            m = part.eval_all(theta, t, y)
            ev = max(ev, abs(m.value - value(t, y)))
            eg = max(eg, np.max(np.abs(m.grad_y - grad(t, y)[1:])))
            eh = max(eh, np.max(np.abs(m.hess_yy - hess(t, y)[1:, 1:])))
        errs["v"].append(ev)
        errs["g"].append(eg)
        errs["h"].append(eh)
    order = {k: np.log2(np.array(v[:-1]) / np.array(v[1:])).mean() for k, v in errs.items()}
    assert order["v"] >= 2.5
    assert order["g"] >= 1.5
    assert order["h"] >= 0.5
