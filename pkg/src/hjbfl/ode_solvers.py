"""Implicit integration of the closed-loop, adjoint, costate and sensitivity
systems on a shared uniform grid.

The nonlinear closed-loop state equation is stepped with a 3-stage Radau IIA
scheme (damped modified Newton). Every linear companion equation (adjoint,
the two costates, the sensitivity pair) is discretized from the
continuous-time formulas independently of the state stepper; the default
one-solve-per-step scheme is trapezoidal (Crank-Nicolson), which keeps the
assembled gradients consistent with the trapezoid objective to O(h^2).
Implicit Euler remains selectable via lin_method="euler".
"""

from __future__ import annotations

import numpy as np

from .core_types import (AdjointTrajectory, ControlTrajectory,
                         CostateTrajectory, DivergenceError, ProblemSpec,
                         SolverError, StateTrajectory, TimeGrid)
from .value_models.base import ValueModel

TOL_NEWTON = 1e-10
MAX_NEWTON = 25
BLOWUP_BOUND = 1e6

_S6 = np.sqrt(6.0)
RADAU3_A = np.array([
    [(88.0 - 7.0 * _S6) / 360.0, (296.0 - 169.0 * _S6) / 1800.0, (-2.0 + 3.0 * _S6) / 225.0],
    [(296.0 + 169.0 * _S6) / 1800.0, (88.0 + 7.0 * _S6) / 360.0, (-2.0 - 3.0 * _S6) / 225.0],
    [(16.0 - _S6) / 36.0, (16.0 + _S6) / 36.0, 1.0 / 9.0],
])
RADAU3_C = np.array([(4.0 - _S6) / 10.0, (4.0 + _S6) / 10.0, 1.0])
EULER_A = np.array([[1.0]])
EULER_C = np.array([1.0])


# --------------------------------------------------------------------------
# stage-batched implicit stepping
# --------------------------------------------------------------------------

def _tableau(method):
    if method == "radau3":
        return RADAU3_A, RADAU3_C
    if method == "euler":
        return EULER_A, EULER_C
    raise SolverError(f"unknown stepping method '{method}'")


def _stage_matrix(hA, J):
    s, n = J.shape[0], J.shape[1]
    M = np.zeros((s * n, s * n))
    for i in range(s):
        for j in range(s):
            blk = -hA[i, j] * J[j]
            if i == j:
                blk = blk + np.eye(n)
            M[i * n:(i + 1) * n, j * n:(j + 1) * n] = blk
    return M


def integrate_implicit(stage_fn, y0, grid: TimeGrid, method="radau3",
                       tol=TOL_NEWTON, max_iter=MAX_NEWTON,
                       blowup_bound=BLOWUP_BOUND) -> np.ndarray:
    """Implicit stepping driven by a stage-batched right-hand side.

    stage_fn(ts, Ys, need_jac) evaluates the rhs (and, when asked, its state
    Jacobian) at the s stage points; both tableaus used here are stiffly
    accurate so the last stage is the step value. The Newton iteration always
    drives the true stage residual below tol, but the stage-system matrix is
    reused across steps and refreshed only on stalls or slow progress.
    """
    y0 = np.asarray(y0, dtype=float).ravel()
    h = grid.h
    A, c = _tableau(method)
    s = len(c)
    out = np.empty((grid.n_nodes, y0.size))
    out[0] = y0
    y = y0
    hA = h * A
    ch = (c * h)[:, None]
    M = None
    F = None
    for k in range(grid.n_steps):
        where = f"step {k}"
        ts = grid.nodes[k] + c * h
        # predictor along the slope at t_k (last stage of the previous step)
        Y = np.tile(y, (s, 1)) if F is None else y[None, :] + ch * F[-1]
        if M is None:
            F, J = stage_fn(ts, Y, True)
            M = _stage_matrix(hA, J)
        else:
            F, _ = stage_fn(ts, Y, False)
        R = Y - y[None, :] - hA @ F
        norm = np.max(np.abs(R))
        iters = 0
        refreshes = 0
        while norm > tol:
            if not np.isfinite(norm):
                raise SolverError(f"non-finite Newton residual at {where}")
            iters += 1
            if iters > max_iter:
                raise SolverError(
                    f"Newton did not converge at {where} (residual {norm:.3e})")
            try:
                dY = np.linalg.solve(M, -R.ravel()).reshape(s, -1)
            except np.linalg.LinAlgError as exc:
                raise SolverError(f"singular Newton matrix at {where}") from exc
            lam = 1.0
            accepted = False
            for _ in range(12):
                Y_try = Y + lam * dY
                F_try, _ = stage_fn(ts, Y_try, False)
                R_try = Y_try - y[None, :] - hA @ F_try
                norm_try = np.max(np.abs(R_try))
                if norm_try < norm or norm_try <= tol:
                    Y, F, R, norm = Y_try, F_try, R_try, norm_try
                    accepted = True
                    break
                lam *= 0.5
            stale = accepted and iters % 6 == 0 and norm > tol
            if not accepted or stale:
                if refreshes >= 3:
                    raise SolverError(f"Newton damping stalled at {where}")
                refreshes += 1
                F, J = stage_fn(ts, Y, True)
                M = _stage_matrix(hA, J)
                R = Y - y[None, :] - hA @ F
                norm = np.max(np.abs(R))
        y = Y[-1]
        if not np.all(np.isfinite(y)):
            raise SolverError(f"non-finite state after step {k}")
        if np.linalg.norm(y) > blowup_bound:
            raise DivergenceError(f"state norm exceeded {blowup_bound:g} after step {k}")
        out[k + 1] = y
    return out


# --------------------------------------------------------------------------
# the closed-loop matrix A(t, y, theta) and node-level caches
# --------------------------------------------------------------------------

class ClosedLoopOperatorA:
    """The matrix A(t, y, theta) = Df^T + [Dg^T F_theta] with layout
    A[k, j] = d f_j / d y_k + sum_i (d g_ji / d y_k) F_i, so the adjoint reads
    -dp/dt = A p + Q1^T Q1 (y - y_d) and forward linearizations use A^T."""

    def __init__(self, spec: ProblemSpec, model: ValueModel, theta):
        self.spec = spec
        self.model = model
        self.theta = model.check_theta(theta)

    def control(self, t, y):
        _, vy = self.model.value_and_grad_y(self.theta, t, y)
        return -(1.0 / self.spec.beta) * (self.spec.g(t, y).T @ vy)

    def matrix(self, t, y):
        return a_matrix(self.spec, t, y, self.control(t, y))


def a_matrix(spec: ProblemSpec, t, y, u) -> np.ndarray:
    return spec.Df(t, y).T + np.einsum("jik,i->kj", spec.Dg(t, y), u)


class NodeData:
    """Dynamics and feedback quantities evaluated at every grid node."""

    def __init__(self, spec, model, theta, y: StateTrajectory, model_xcache=None):
        self.spec = spec
        self.model = model
        self.theta = model.check_theta(theta)
        self.y = y
        grid = y.grid
        ts, Y = grid.nodes, y.values
        self.ts, self.Y = ts, Y
        if model_xcache is None:
            vy, vyy = model.grad_hess_batch(theta, ts, Y)
        else:
            vy, vyy = model_xcache
        self.vy, self.vyy = vy, vyy
        self.g = spec.g_stack(ts, Y)
        self.Dg = spec.Dg_stack(ts, Y)
        self.Df = spec.Df_stack(ts, Y)
        inv = -(1.0 / spec.beta)
        self.F = inv * np.einsum("kji,kj->ki", self.g, vy)
        self.DyF = inv * (np.einsum("kjil,kj->kil", self.Dg, vy)
                          + np.einsum("kji,kjl->kil", self.g, vyy))
        self.A = (np.swapaxes(self.Df, 1, 2)
                  + np.einsum("kjil,ki->klj", self.Dg, self.F))

    def dA_top_p_kappa(self, k, p, kappa):
        """[D_y A^T p] kappa at node k (needs second derivatives of f, g)."""
        spec = self.spec
        t, yk = self.ts[k], self.Y[k]
        out = np.einsum("jkl,j,k->l", spec.Dyyf(t, yk), p, kappa)
        out += np.einsum("jikl,i,j,k->l", spec.Dyyg(t, yk), self.F[k], p, kappa)
        dgk_t_p = np.einsum("jik,k,j->i", self.Dg[k], kappa, p)
        out += self.DyF[k].T @ dgk_t_p
        return out

    def dA_dy_deltaY_p(self, k, dY, p):
        """[D_y A deltaY] p at node k."""
        spec = self.spec
        t, yk = self.ts[k], self.Y[k]
        out = np.einsum("jkl,l,j->k", spec.Dyyf(t, yk), dY, p)
        out += np.einsum("jikl,i,l,j->k", spec.Dyyg(t, yk), self.F[k], dY, p)
        out += np.einsum("jik,il,l,j->k", self.Dg[k], self.DyF[k], dY, p)
        return out

    def dA_dtheta_v_p(self, k, v, p):
        """[d_theta A dtheta] p at node k given v = D_theta F dtheta."""
        return np.einsum("jik,i,j->k", self.Dg[k], v, p)

    def _stack_second_derivs(self):
        spec = self.spec
        Dyyf = (None if spec.dyyf_zero else
                np.stack([spec.Dyyf(t, yk) for t, yk in zip(self.ts, self.Y)]))
        Dyyg = (None if spec.dyyg_zero else
                np.stack([spec.Dyyg(t, yk) for t, yk in zip(self.ts, self.Y)]))
        return Dyyf, Dyyg

    def zeta_sources(self, p_vals, kappa_vals):
        """[D_y A^T p] kappa at all nodes, batched."""
        dg_t_p = np.einsum("kjiq,kq,kj->ki", self.Dg, kappa_vals, p_vals)
        out = np.einsum("kil,ki->kl", self.DyF, dg_t_p)
        Dyyf, Dyyg = self._stack_second_derivs()
        if Dyyf is not None:
            out += np.einsum("kjml,kj,km->kl", Dyyf, p_vals, kappa_vals)
        if Dyyg is not None:
            out += np.einsum("kjiml,ki,kj,km->kl", Dyyg, self.F, p_vals, kappa_vals)
        return out

    def sensitivity_sources(self, dY, p_vals, v):
        """([D_y A dY] + [d_theta A dtheta]) p at all nodes, batched."""
        out = np.einsum("kjim,kil,kl,kj->km", self.Dg, self.DyF, dY, p_vals)
        out += np.einsum("kjim,ki,kj->km", self.Dg, v, p_vals)
        Dyyf, Dyyg = self._stack_second_derivs()
        if Dyyf is not None:
            out += np.einsum("kjml,kl,kj->km", Dyyf, dY, p_vals)
        if Dyyg is not None:
            out += np.einsum("kjiml,ki,kl,kj->km", Dyyg, self.F, dY, p_vals)
        return out


# --------------------------------------------------------------------------
# the integrators
# --------------------------------------------------------------------------

def integrate_closed_loop(spec: ProblemSpec, model: ValueModel, theta, y0,
                          grid: TimeGrid, method="radau3", tol_newton=TOL_NEWTON,
                          max_newton=MAX_NEWTON,
                          blowup_bound=BLOWUP_BOUND) -> StateTrajectory:
    """Solve dy/dt = f(y) + g(y) F_theta(t, y) from y0."""
    inv = -(1.0 / spec.beta)
    xeval = model.make_xeval(theta)

    def stage_fn(ts, Ys, need_jac):
        s = len(ts)
        g = np.stack([spec.g(ts[i], Ys[i]) for i in range(s)])
        fv = np.stack([spec.f(ts[i], Ys[i]) for i in range(s)])
        vy, vyy = xeval(ts, Ys, need_jac)
        u = inv * np.matmul(vy[:, None, :], g)[:, 0, :]
        F = fv + np.matmul(g, u[:, :, None])[:, :, 0]
        if not need_jac:
            return F, None
        Dg = np.stack([spec.Dg(ts[i], Ys[i]) for i in range(s)])
        Df = np.stack([spec.Df(ts[i], Ys[i]) for i in range(s)])
        DyF = inv * (np.einsum("bjil,bj->bil", Dg, vy)
                     + np.matmul(np.swapaxes(g, 1, 2), vyy))
        J = Df + np.einsum("bjil,bi->bjl", Dg, u) + np.matmul(g, DyF)
        return F, J

    vals = integrate_implicit(stage_fn, y0, grid, method=method, tol=tol_newton,
                              max_iter=max_newton, blowup_bound=blowup_bound)
    return StateTrajectory(grid, vals)


def integrate_closed_loop_ensemble(spec: ProblemSpec, model: ValueModel, theta,
                                   Y0s, grid: TimeGrid, method="radau3",
                                   tol_newton=TOL_NEWTON, max_newton=MAX_NEWTON,
                                   blowup_bound=BLOWUP_BOUND):
    """Closed-loop solves for many initial conditions in lockstep.

    Equivalent to integrate_closed_loop per member (same residual tolerance)
    but evaluates the value model once per Newton iteration for all members.
    Returns a list of StateTrajectory in input order.
    """
    Y0s = np.atleast_2d(np.asarray(Y0s, float))
    N, n = Y0s.shape
    inv = -(1.0 / spec.beta)
    xeval = model.make_xeval(theta)
    h = grid.h
    A, c = _tableau(method)
    s = len(c)
    hA = h * A
    ch = (c * h)[None, :, None]

    def eval_F(ts_s, Z, need_jac):
        flat_t = np.tile(ts_s, N)
        flat_y = Z.reshape(N * s, n)
        g = spec.g_stack(flat_t, flat_y)
        fv = spec.f_stack(flat_t, flat_y)
        vy, vyy = xeval(flat_t, flat_y, need_jac)
        u = inv * np.matmul(vy[:, None, :], g)[:, 0, :]
        F = (fv + np.matmul(g, u[:, :, None])[:, :, 0]).reshape(N, s, n)
        if not need_jac:
            return F, None
        Dg = spec.Dg_stack(flat_t, flat_y)
        Df = spec.Df_stack(flat_t, flat_y)
        DyF = inv * (np.einsum("bjil,bj->bil", Dg, vy)
                     + np.matmul(np.swapaxes(g, 1, 2), vyy))
        J = (Df + np.einsum("bjil,bi->bjl", Dg, u)
             + np.matmul(g, DyF)).reshape(N, s, n, n)
        M = np.zeros((N, s * n, s * n))
        for i in range(s):
            for j in range(s):
                blk = -hA[i, j] * J[:, j]
                if i == j:
                    blk = blk + np.eye(n)[None]
                M[:, i * n:(i + 1) * n, j * n:(j + 1) * n] = blk
        return F, M

    out = np.empty((N, grid.n_nodes, n))
    out[:, 0] = Y0s
    y = Y0s.copy()
    M = None
    F = None
    for k in range(grid.n_steps):
        where = f"step {k}"
        ts_s = grid.nodes[k] + c * h
        Z = (np.repeat(y[:, None, :], s, axis=1) if F is None
             else y[:, None, :] + ch * F[:, -1:, :])
        if M is None:
            F, M = eval_F(ts_s, Z, True)
        else:
            F, _ = eval_F(ts_s, Z, False)
        R = Z - y[:, None, :] - np.matmul(hA[None], F)
        with np.errstate(invalid="ignore"):
            norms = np.max(np.abs(R), axis=(1, 2))
        bad0 = ~np.isfinite(norms)
        if bad0.any():                      # predictor overshot: restart from y
            Z[bad0] = y[bad0][:, None, :]
            F, _ = eval_F(ts_s, Z, False)
            R = Z - y[:, None, :] - np.matmul(hA[None], F)
            norms = np.max(np.abs(R), axis=(1, 2))
            if not np.all(np.isfinite(norms)):
                bad = int(np.nonzero(~np.isfinite(norms))[0][0])
                raise SolverError(f"member {bad}: non-finite Newton residual at {where}")
        iters = 0
        refreshes = 0
        while np.max(norms) > tol_newton:
            iters += 1
            if iters > max_newton:
                bad = int(np.argmax(norms))
                raise SolverError(
                    f"member {bad}: Newton did not converge at {where} "
                    f"(residual {norms[bad]:.3e})")
            try:
                dZ = np.linalg.solve(M, -R.reshape(N, s * n)[:, :, None])[:, :, 0]
            except np.linalg.LinAlgError as exc:
                raise SolverError(f"singular Newton matrix at {where}") from exc
            dZ = dZ.reshape(N, s, n)
            remaining = norms > tol_newton
            lam = np.ones(N)
            for _ in range(12):
                if not remaining.any():
                    break
                mask = (lam * remaining)[:, None, None]
                Z_try = Z + mask * dZ
                F_try, _ = eval_F(ts_s, Z_try, False)
                R_try = Z_try - y[:, None, :] - np.matmul(hA[None], F_try)
                with np.errstate(invalid="ignore"):
                    norms_try = np.max(np.abs(R_try), axis=(1, 2))
                    improved = remaining & ((norms_try < norms)
                                            | (norms_try <= tol_newton))
                if improved.any():
                    Z[improved] = Z_try[improved]
                    F[improved] = F_try[improved]
                    R[improved] = R_try[improved]
                    norms[improved] = norms_try[improved]
                remaining &= ~improved
                lam[remaining] *= 0.5
            stale = iters % 6 == 0 and np.max(norms) > tol_newton
            if remaining.any() or stale:
                if refreshes >= 3:
                    bad = int(np.argmax(norms))
                    raise SolverError(f"member {bad}: Newton damping stalled at {where}")
                refreshes += 1
                F, M = eval_F(ts_s, Z, True)
                R = Z - y[:, None, :] - np.matmul(hA[None], F)
                norms = np.max(np.abs(R), axis=(1, 2))
        y = Z[:, -1, :].copy()
        if not np.all(np.isfinite(y)):
            bad = int(np.nonzero(~np.isfinite(y).all(axis=1))[0][0])
            raise SolverError(f"member {bad}: non-finite state after step {k}")
        ynorm = np.linalg.norm(y, axis=1)
        if np.any(ynorm > blowup_bound):
            bad = int(np.nonzero(ynorm > blowup_bound)[0][0])
            raise DivergenceError(
                f"member {bad}: state norm exceeded {blowup_bound:g} after step {k}")
        out[:, k + 1] = y
    return [StateTrajectory(grid, out[i]) for i in range(N)]


def integrate_controlled(spec: ProblemSpec, u: ControlTrajectory, y0,
                         grid: TimeGrid, method="radau3", tol_newton=TOL_NEWTON,
                         max_newton=MAX_NEWTON,
                         blowup_bound=BLOWUP_BOUND) -> StateTrajectory:
    """Solve dy/dt = f(y) + g(y) u(t) with u linearly interpolated from nodes."""
    uv = u.values
    h = grid.h
    n = spec.n

    def u_of_t(t):
        s = min(max(t / h, 0.0), float(grid.n_steps))
        k = min(int(s), grid.n_steps - 1)
        w = s - k
        return (1.0 - w) * uv[k] + w * uv[k + 1]

    def stage_fn(ts, Ys, need_jac):
        s = len(ts)
        F = np.empty((s, n))
        J = np.empty((s, n, n)) if need_jac else None
        for i in range(s):
            t, yk = ts[i], Ys[i]
            ui = u_of_t(t)
            F[i] = spec.f(t, yk) + spec.g(t, yk) @ ui
            if need_jac:
                J[i] = spec.Df(t, yk) + np.einsum("jil,i->jl", spec.Dg(t, yk), ui)
        return F, J

    vals = integrate_implicit(stage_fn, y0, grid, method=method, tol=tol_newton,
                              max_iter=max_newton, blowup_bound=blowup_bound)
    return StateTrajectory(grid, vals)


LIN_METHOD = "cn"   # trapezoidal (Crank-Nicolson) linear steps by default


def _linear_forward(M_nodes, src, grid, x0, lin_method, what) -> np.ndarray:
    """Step dx/dt = M(t) x + s(t) forward from x0 (implicit Euler or CN)."""
    h = grid.h
    n = M_nodes.shape[1]
    eye = np.eye(n)
    out = np.empty((grid.n_nodes, n))
    out[0] = x0
    cn = lin_method == "cn"
    for k in range(grid.n_steps):
        if cn:
            lhs = eye - 0.5 * h * M_nodes[k + 1]
            rhs = ((eye + 0.5 * h * M_nodes[k]) @ out[k]
                   + 0.5 * h * (src[k] + src[k + 1]))
        else:
            lhs = eye - h * M_nodes[k + 1]
            rhs = out[k] + h * src[k + 1]
        try:
            out[k + 1] = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular {what} step matrix at node {k + 1}") from exc
    return out


def _linear_backward(M_nodes, src, grid, xT, lin_method, what) -> np.ndarray:
    """Step -dx/dt = M(t) x + s(t) backward from x(T) = xT."""
    h = grid.h
    n = M_nodes.shape[1]
    eye = np.eye(n)
    out = np.empty((grid.n_nodes, n))
    out[-1] = xT
    cn = lin_method == "cn"
    for k in range(grid.n_steps - 1, -1, -1):
        if cn:
            lhs = eye - 0.5 * h * M_nodes[k]
            rhs = ((eye + 0.5 * h * M_nodes[k + 1]) @ out[k + 1]
                   + 0.5 * h * (src[k] + src[k + 1]))
        else:
            lhs = eye - h * M_nodes[k]
            rhs = out[k + 1] + h * src[k]
        try:
            out[k] = np.linalg.solve(lhs, rhs)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular {what} step matrix at node {k}") from exc
    return out


def integrate_adjoint(spec: ProblemSpec, model: ValueModel, theta,
                      y: StateTrajectory, node_data: NodeData = None,
                      lin_method=LIN_METHOD) -> AdjointTrajectory:
    """Adjoint of the closed-loop state equation (linear, one solve per step)."""
    nd = node_data or NodeData(spec, model, theta, y)
    ydn = spec.y_d_nodes(y.grid)
    q = (y.values - ydn) @ spec.Q1tQ1.T
    pT = spec.terminal_adjoint(y.values[-1])
    vals = _linear_backward(nd.A, q, y.grid, pT, lin_method, "adjoint")
    return AdjointTrajectory(y.grid, vals)


def integrate_costate_kappa(spec: ProblemSpec, model: ValueModel, theta,
                            y: StateTrajectory, p_hat,
                            node_data: NodeData = None,
                            lin_method=LIN_METHOD) -> CostateTrajectory:
    """Forward costate dkappa/dt = A^T kappa + p_hat, kappa(0) = 0."""
    nd = node_data or NodeData(spec, model, theta, y)
    ph = p_hat.values if hasattr(p_hat, "values") else np.asarray(p_hat, float)
    vals = _linear_forward(np.swapaxes(nd.A, 1, 2), ph, y.grid,
                           np.zeros(spec.n), lin_method, "costate")
    return CostateTrajectory(y.grid, vals)


def integrate_costate_zeta(spec: ProblemSpec, model: ValueModel, theta,
                           y: StateTrajectory, p: AdjointTrajectory,
                           kappa: CostateTrajectory, y_hat, y_hatT,
                           node_data: NodeData = None,
                           lin_method=LIN_METHOD) -> CostateTrajectory:
    """Backward costate with terminal value alpha Q2^T Q2 kappa(T) + y_hatT."""
    nd = node_data or NodeData(spec, model, theta, y)
    grid = y.grid
    yh = y_hat.values if hasattr(y_hat, "values") else np.asarray(y_hat, float)
    kv = kappa.values
    pv = p.values
    B = nd.A + np.einsum("kmi,kjm->kij", nd.DyF, nd.g)
    src = kv @ spec.Q1tQ1.T + yh + nd.zeta_sources(pv, kv)
    zT = spec.alpha * (spec.Q2tQ2 @ kv[-1]) + np.asarray(y_hatT, float)
    vals = _linear_backward(B, src, grid, zT, lin_method, "costate")
    return CostateTrajectory(grid, vals)


def integrate_sensitivity(spec: ProblemSpec, model: ValueModel, theta, dtheta,
                          y: StateTrajectory, p: AdjointTrajectory,
                          node_data: NodeData = None, model_cache=None,
                          lin_method=LIN_METHOD):
    """Linearized state/adjoint response (deltaY, deltaP) to a theta direction."""
    nd = node_data or NodeData(spec, model, theta, y)
    grid = y.grid
    dtheta = np.asarray(dtheta, float).ravel()
    if model_cache is None:
        model_cache = model.eval_nodes(theta, grid.nodes, y.values)
    # v_k = D_theta F dtheta at each node
    inv = -(1.0 / spec.beta)
    vyth_dth = np.einsum("knp,p->kn", model_cache.grad_y_theta, dtheta)
    v = inv * np.einsum("kji,kj->ki", nd.g, vyth_dth)

    C = np.swapaxes(nd.A, 1, 2) + np.einsum("kjm,kml->kjl", nd.g, nd.DyF)
    rY = np.einsum("kjm,km->kj", nd.g, v)
    dY = _linear_forward(C, rY, grid, np.zeros(spec.n), lin_method, "sensitivity")

    pv = p.values
    src = dY @ spec.Q1tQ1.T + nd.sensitivity_sources(dY, pv, v)
    dPT = spec.alpha * (spec.Q2tQ2 @ dY[-1])
    dP = _linear_backward(nd.A, src, grid, dPT, lin_method, "sensitivity")
    return StateTrajectory(grid, dY), AdjointTrajectory(grid, dP)


def adjoint_for_control(spec: ProblemSpec, y: StateTrajectory,
                        u: ControlTrajectory,
                        lin_method=LIN_METHOD) -> AdjointTrajectory:
    """Adjoint along a (y, u) pair with the control as data (oracle use)."""
    grid = y.grid
    A_nodes = np.stack([
        a_matrix(spec, t, yk, uk)
        for t, yk, uk in zip(grid.nodes, y.values, u.values)
    ])
    ydn = spec.y_d_nodes(grid)
    q = (y.values - ydn) @ spec.Q1tQ1.T
    pT = spec.terminal_adjoint(y.values[-1])
    vals = _linear_backward(A_nodes, q, grid, pT, lin_method, "adjoint")
    return AdjointTrajectory(grid, vals)
