"""Augmented objective over an ensemble of initial conditions and its exact
gradient via the costate construction.

Per ensemble member the pipeline is: closed-loop state, adjoint (only when
the gradient-matching penalty is active), the accumulated value/cost-to-go
mismatch, the four source ("hat") terms, the forward and backward costates,
and finally the weighted reduction of the member gradients. All integrals
share one trapezoid rule on the common grid.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core_types import (AdjointTrajectory, ContractError, ControlTrajectory,
                         CostateTrajectory, DivergenceError, EnsembleSet,
                         PenaltyConfig, ProblemSpec, StateTrajectory, TimeGrid,
                         cumtrapz_backward, cumtrapz_forward, trapezoid)
from .ode_solvers import (NodeData, integrate_adjoint,
                          integrate_closed_loop_ensemble,
                          integrate_costate_kappa, integrate_costate_zeta)
from .value_models.base import ModelNodeCache, ValueModel


def worker_count() -> int:
    env = os.environ.get("FEEDBACK_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# scalar cost pieces
# --------------------------------------------------------------------------

def _check_same_grid(*trajs):
    g0 = trajs[0].grid
    for t in trajs[1:]:
        if t.grid.n_steps != g0.n_steps or t.grid.T != g0.T:
            raise ContractError("trajectories must share one grid")


def _tracking_integrand(spec: ProblemSpec, y: StateTrajectory,
                        u: ControlTrajectory) -> np.ndarray:
    ydn = spec.y_d_nodes(y.grid)
    r = (y.values - ydn) @ spec.Q1.T
    track = np.einsum("ki,ki->k", r, r)
    ctrl = np.einsum("ki,ki->k", u.values, u.values)
    return 0.5 * (track + spec.beta * ctrl)


def running_cost(spec: ProblemSpec, y: StateTrajectory, u: ControlTrajectory) -> float:
    """Tracking + control cost plus the weighted terminal penalty."""
    _check_same_grid(y, u)
    w = _tracking_integrand(spec, y, u)
    return float(trapezoid(w, y.grid)) + spec.terminal_cost(y.values[-1])


def cost_to_go(spec: ProblemSpec, y: StateTrajectory, u: ControlTrajectory) -> np.ndarray:
    """Remaining cost from each grid node (backward cumulative trapezoid)."""
    _check_same_grid(y, u)
    w = _tracking_integrand(spec, y, u)
    return cumtrapz_backward(w, y.grid) + spec.terminal_cost(y.values[-1])


def phi_accumulator(model: ValueModel, theta, y: StateTrajectory,
                    J_t: np.ndarray) -> np.ndarray:
    """Running integral of the value-vs-cost-to-go mismatch; zero at t=0."""
    V, _ = model.value_grad_y_batch(theta, y.grid.nodes, y.values)
    return cumtrapz_forward(V - np.asarray(J_t, float), y.grid)


def augmented_cost(spec: ProblemSpec, penalties: PenaltyConfig, model: ValueModel,
                   theta, y: StateTrajectory, p: AdjointTrajectory) -> float:
    """Closed-loop cost plus the two dynamic-programming penalties."""
    _check_same_grid(y, p)
    grid = y.grid
    V, vy = model.value_grad_y_batch(theta, grid.nodes, y.values)
    g = np.stack([spec.g(t, yk) for t, yk in zip(grid.nodes, y.values)])
    u = ControlTrajectory(grid, -(1.0 / spec.beta) * np.einsum("kji,kj->ki", g, vy))
    J = running_cost(spec, y, u)
    J_t = cost_to_go(spec, y, u)
    pen1 = 0.5 * penalties.gamma1 * trapezoid((V - J_t) ** 2, grid)
    dv = vy - p.values
    pen2 = 0.5 * penalties.gamma2 * trapezoid(np.einsum("ki,ki->k", dv, dv), grid)
    return J + float(pen1) + float(pen2)


# --------------------------------------------------------------------------
# hat terms (gradient sources)
# --------------------------------------------------------------------------

@dataclass
class HatTerms:
    y_hat: np.ndarray       # (K, n)
    y_hatT: np.ndarray      # (n,)
    p_hat: np.ndarray       # (K, n)
    theta_hat: np.ndarray   # (N_theta,)
    phi: np.ndarray         # (K,)


def _hat_sources(spec, penalties, V, vy, vyy, y_vals, p_vals, J_t, Phi, nd):
    """(y_hat, y_hatT, p_hat, coeff) node arrays; coeff = 1 - gamma1 * Phi."""
    g1, g2 = penalties.gamma1, penalties.gamma2
    ydn = np.stack([np.asarray(spec.y_d(t), float).reshape(spec.n) for t in nd.ts])
    coeff = 1.0 - g1 * Phi
    y_hat = (coeff[:, None] * ((y_vals - ydn) @ spec.Q1tQ1.T)
             + spec.beta * coeff[:, None] * np.einsum("kil,ki->kl", nd.DyF, nd.F)
             + g1 * (V - J_t)[:, None] * vy
             + g2 * np.einsum("kjl,kl->kj", vyy, vy - p_vals))
    phi_term = Phi[-1] if penalties.phi_terminal == "derived_T" else 0.0
    y_hatT = spec.alpha * (1.0 - g1 * phi_term) * (spec.Q2tQ2 @ (y_vals[-1] - spec.y_dT))
    p_hat = g2 * (p_vals - vy)
    return y_hat, y_hatT, p_hat, coeff


def hat_terms(spec: ProblemSpec, penalties: PenaltyConfig, model: ValueModel,
              theta, y: StateTrajectory, p: AdjointTrajectory,
              u: ControlTrajectory, J_t, Phi, model_cache: ModelNodeCache = None,
              node_data: NodeData = None) -> HatTerms:
    """Source terms feeding the costate equations and the explicit theta part."""
    grid = y.grid
    mc = model_cache or model.eval_nodes(theta, grid.nodes, y.values)
    nd = node_data or NodeData(spec, model, theta, y, model_xcache=(mc.grad_y, mc.hess_yy))
    g1, g2 = penalties.gamma1, penalties.gamma2
    J_t = np.asarray(J_t, float)
    Phi = np.asarray(Phi, float)
    y_hat, y_hatT, p_hat, coeff = _hat_sources(
        spec, penalties, mc.value, mc.grad_y, mc.hess_yy, y.values, p.values,
        J_t, Phi, nd)

    gF = np.einsum("kjm,km->kj", nd.g, nd.F)
    dthf_t_f = -(1.0 / spec.beta) * np.einsum("kjp,kj->kp", mc.grad_y_theta, gF)
    integrand = (g1 * (mc.value - J_t)[:, None] * mc.grad_theta
                 + spec.beta * coeff[:, None] * dthf_t_f
                 + g2 * np.einsum("knp,kn->kp", mc.grad_y_theta, mc.grad_y - p.values))
    theta_hat = trapezoid(integrand, grid)

    return HatTerms(y_hat=y_hat, y_hatT=y_hatT, p_hat=p_hat,
                    theta_hat=theta_hat, phi=Phi)


# --------------------------------------------------------------------------
# per-member pipeline and ensemble reductions
# --------------------------------------------------------------------------

@dataclass
class MemberResult:
    y: StateTrajectory
    u: ControlTrajectory
    p: AdjointTrajectory
    J: float
    J_t: np.ndarray
    pen1: float
    pen2: float
    V: np.ndarray
    grad_y_model: np.ndarray
    gradient: np.ndarray = None

    @property
    def J_aug(self) -> float:
        return self.J + self.pen1 + self.pen2


@dataclass
class EvaluationBundle:
    members: list
    value: float
    J_term: float
    pen1_term: float
    pen2_term: float
    tikhonov: float

    def components(self) -> dict:
        return {"J": self.J_term, "penalty_value": self.pen1_term,
                "penalty_gradient": self.pen2_term, "tikhonov": self.tikhonov}


def _member_tail(spec, penalties, model, theta, y, grid, need_grad):
    """Everything after the closed-loop state solve for one member."""
    g1, g2 = penalties.gamma1, penalties.gamma2
    if need_grad:
        V, vy, vyy = model.eval_nodes_x(theta, grid.nodes, y.values)
        nd = NodeData(spec, model, theta, y, model_xcache=(vy, vyy))
        u = ControlTrajectory(grid, nd.F)
    else:
        nd = None
        V, vy = model.value_grad_y_batch(theta, grid.nodes, y.values)
        g = spec.g_stack(grid.nodes, y.values)
        u = ControlTrajectory(grid, -(1.0 / spec.beta) * np.einsum("kji,kj->ki", g, vy))

    J = running_cost(spec, y, u)
    J_t = cost_to_go(spec, y, u)

    if g2 > 0.0:
        p = integrate_adjoint(spec, model, theta, y, node_data=nd)
    else:
        p = AdjointTrajectory(grid, np.zeros((grid.n_nodes, spec.n)))

    pen1 = 0.5 * g1 * float(trapezoid((V - J_t) ** 2, grid)) if g1 > 0 else 0.0
    dv = vy - p.values
    pen2 = 0.5 * g2 * float(trapezoid(np.einsum("ki,ki->k", dv, dv), grid)) if g2 > 0 else 0.0

    res = MemberResult(y=y, u=u, p=p, J=J, J_t=J_t, pen1=pen1, pen2=pen2,
                       V=V, grad_y_model=vy)
    if not need_grad:
        return res

    Phi = cumtrapz_forward(V - J_t, grid)
    y_hat, y_hatT, p_hat, coeff = _hat_sources(
        spec, penalties, V, vy, vyy, y.values, p.values, J_t, Phi, nd)
    if g2 > 0.0:
        kappa = integrate_costate_kappa(spec, model, theta, y, p_hat, node_data=nd)
    else:
        kappa = CostateTrajectory(grid, np.zeros((grid.n_nodes, spec.n)))
    zeta = integrate_costate_zeta(spec, model, theta, y, p, kappa,
                                  y_hat, y_hatT, node_data=nd)

    # The theta gradient is one contraction against D_theta V and the mixed
    # y/theta derivative: collect the weights and run a single reverse sweep.
    w = np.einsum("kjm,kj->km", nd.g, zeta.values)
    if g2 > 0.0:
        w += np.einsum("kjmq,kq,kj->km", nd.Dg, kappa.values, p.values)
    gw = np.einsum("kjm,km->kj", nd.g, w)
    gF = np.einsum("kjm,km->kj", nd.g, nd.F)
    tw = grid.trapezoid_weights()
    w_value = tw * (g1 * (V - J_t))
    w_grady = tw[:, None] * (-coeff[:, None] * gF + g2 * (vy - p.values)
                             - (1.0 / spec.beta) * gw)
    res.gradient = model.theta_vjp(theta, grid.nodes, y.values, w_value, w_grady)
    return res


def _run_members(spec, penalties, model, theta, ensemble: EnsembleSet,
                 grid: TimeGrid, need_grad, state_method, threads=None):
    _, points, _ = ensemble.split("train")
    threads = worker_count() if threads is None else max(1, threads)
    ys = integrate_closed_loop_ensemble(spec, model, theta, points, grid,
                                        method=state_method)

    def run(y):
        return _member_tail(spec, penalties, model, theta, y, grid, need_grad)

    if threads == 1 or len(ys) == 1:
        return [run(y) for y in ys]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(run, ys))


def ensemble_objective(spec, penalties, model, theta, ensemble, grid,
                       state_method="radau3", threads=None):
    """Weighted augmented cost over the training split plus Tikhonov term."""
    theta = model.check_theta(theta)
    members = _run_members(spec, penalties, model, theta, ensemble, grid,
                           need_grad=False, state_method=state_method, threads=threads)
    return _reduce(penalties, theta, ensemble, members)


def ensemble_gradient(spec, penalties, model, theta, ensemble, grid,
                      state_method="radau3", threads=None) -> np.ndarray:
    """Exact gradient of the reduced ensemble objective."""
    _, grad, _ = ensemble_objective_gradient(spec, penalties, model, theta,
                                             ensemble, grid,
                                             state_method=state_method,
                                             threads=threads)
    return grad


def ensemble_objective_gradient(spec, penalties, model, theta, ensemble, grid,
                                state_method="radau3", threads=None):
    """(value, gradient, bundle) sharing one pass over the ensemble."""
    theta = model.check_theta(theta)
    members = _run_members(spec, penalties, model, theta, ensemble, grid,
                           need_grad=True, state_method=state_method, threads=threads)
    value, bundle = _reduce(penalties, theta, ensemble, members)
    _, _, weights = ensemble.split("train")
    grad = penalties.gamma_eps * theta
    for wi, m in zip(weights, members):   # fixed member order keeps this deterministic
        grad = grad + wi * m.gradient
    return value, grad, bundle


def _reduce(penalties, theta, ensemble, members):
    _, _, weights = ensemble.split("train")
    J_term = sum(wi * m.J for wi, m in zip(weights, members))
    pen1 = sum(wi * m.pen1 for wi, m in zip(weights, members))
    pen2 = sum(wi * m.pen2 for wi, m in zip(weights, members))
    tik = 0.5 * penalties.gamma_eps * float(theta @ theta)
    value = J_term + pen1 + pen2 + tik
    bundle = EvaluationBundle(members=members, value=value, J_term=J_term,
                              pen1_term=pen1, pen2_term=pen2, tikhonov=tik)
    return value, bundle


# --------------------------------------------------------------------------
# JSON-lines trace of training progress
# --------------------------------------------------------------------------

class TraceLogger:
    """Appends one JSON object per optimizer iteration."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w")

    def log(self, iteration, value, grad_norm, components=None):
        row = {"iter": int(iteration), "J_N": float(value),
               "grad_norm": float(grad_norm)}
        if components:
            row.update({k: float(v) for k, v in components.items()})
        self._fh.write(json.dumps(row) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
