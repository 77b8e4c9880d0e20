"""Reference solvers: adjoint-based open-loop stationary points per initial
condition, and a finite-horizon Riccati oracle for linear-quadratic cases.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .core_types import (ControlTrajectory, DivergenceError, OracleError,
                         ProblemSpec, StateTrajectory, TimeGrid, Trajectory)
from .learning import cost_to_go, running_cost
from .ode_solvers import adjoint_for_control, integrate_controlled
from .optimize import BBConfig, bb_minimize


@dataclass(frozen=True)
class LQRSpec:
    """Linear dynamics dy/dt = A_lin y + B u with the standard tracking cost
    toward zero; the constant-B case admits a Riccati characterization."""

    A_lin: np.ndarray
    B: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    alpha: float
    beta: float
    T: float

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A_lin, float))
        B = np.atleast_2d(np.asarray(self.B, float))
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise OracleError("inconsistent LQR dimensions")
        object.__setattr__(self, "A_lin", A)
        object.__setattr__(self, "B", B)

    @property
    def n(self) -> int:
        return self.A_lin.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def problem_spec(self) -> ProblemSpec:
        A, B = self.A_lin, self.B
        n, m = self.n, self.m
        DgZ = np.zeros((n, m, n))
        return ProblemSpec(
            n=n, m=m, T=self.T, beta=self.beta, alpha=self.alpha,
            Q1=self.Q1, Q2=self.Q2,
            y_d=lambda t: np.zeros(n), y_dT=np.zeros(n),
            f=lambda t, y: A @ y, g=lambda t, y: B,
            Df=lambda t, y: A, Dg=lambda t, y: DgZ,
            f_batch=lambda ts, Ys: Ys @ A.T,
            g_batch=lambda ts, Ys: np.broadcast_to(B, (len(Ys), n, m)),
            Df_batch=lambda ts, Ys: np.broadcast_to(A, (len(Ys), n, n)),
            Dg_batch=lambda ts, Ys: np.broadcast_to(DgZ, (len(Ys), n, m, n)),
        )


# --------------------------------------------------------------------------
# open-loop stationary point by BB on the control-reduced functional
# --------------------------------------------------------------------------

def control_reduced_gradient(spec: ProblemSpec, u: ControlTrajectory,
                             y: StateTrajectory, p) -> np.ndarray:
    """Node-wise L2 gradient beta*u + g(y)^T p of the reduced cost."""
    g = np.stack([spec.g(t, yk) for t, yk in zip(y.grid.nodes, y.values)])
    return spec.beta * u.values + np.einsum("kji,kj->ki", g, p.values)


def solve_open_loop(spec: ProblemSpec, y0, u_init, grid: TimeGrid,
                    bb_config: BBConfig, state_method="radau3"):
    """Stationary (y, u, p, J) of the open-loop problem from one y0.

    Each evaluation solves the state forward with the current control, the
    adjoint backward along it, and reads off the node-wise gradient.
    """
    y0 = np.asarray(y0, float).ravel()
    if u_init is None:
        u_init = np.zeros((grid.n_nodes, spec.m))
    u0 = u_init.values if hasattr(u_init, "values") else np.asarray(u_init, float)
    shape = (grid.n_nodes, spec.m)
    if u0.shape != shape:
        raise OracleError(f"u_init has shape {u0.shape}, expected {shape}")

    def fun_grad(uflat):
        u = ControlTrajectory(grid, uflat.reshape(shape))
        try:
            y = integrate_controlled(spec, u, y0, grid, method=state_method)
        except DivergenceError:
            return np.inf, None
        p = adjoint_for_control(spec, y, u)
        G = control_reduced_gradient(spec, u, y, p)
        return running_cost(spec, y, u), G.ravel()

    def f_only(uflat):
        u = ControlTrajectory(grid, uflat.reshape(shape))
        try:
            y = integrate_controlled(spec, u, y0, grid, method=state_method)
        except DivergenceError:
            return np.inf
        return running_cost(spec, y, u)

    try:
        u_star, _ = bb_minimize(fun_grad, u0.ravel(), bb_config, f_only=f_only)
    except RuntimeError as exc:
        raise OracleError(f"open-loop solve failed: {exc}") from exc
    u = ControlTrajectory(grid, u_star.reshape(shape))
    y = integrate_controlled(spec, u, y0, grid, method=state_method)
    p = adjoint_for_control(spec, y, u)
    return y, u, p, running_cost(spec, y, u)


# --------------------------------------------------------------------------
# Riccati oracle
# --------------------------------------------------------------------------

def _ensemble_states(spec, U, Y0s, grid, method="radau3",
                     tol=1e-10, max_iter=25, blowup=1e6):
    """Forward solves dy/dt = f + g u_i(t) for all members in lockstep.

    U is (N, n_nodes, m) node values, linearly interpolated at stage times.
    Returns (N, n_nodes, n).
    """
    from .ode_solvers import RADAU3_A, RADAU3_C, EULER_A, EULER_C
    A, c = (RADAU3_A, RADAU3_C) if method == "radau3" else (EULER_A, EULER_C)
    N, _, m = U.shape
    n = spec.n
    s = len(c)
    h = grid.h
    hA = h * A
    ch = (c * h)[None, :, None]
    eye = np.eye(n)

    out = np.empty((N, grid.n_nodes, n))
    out[:, 0] = Y0s
    y = Y0s.copy()
    M = None
    F = None
    for k in range(grid.n_steps):
        ts_s = grid.nodes[k] + c * h
        u_stage = ((1.0 - c)[None, :, None] * U[:, k][:, None, :]
                   + c[None, :, None] * U[:, k + 1][:, None, :])
        flat_t = np.tile(ts_s, N)
        u_flat = u_stage.reshape(N * s, m)

        def eval_F(Z, need_jac):
            flat_y = Z.reshape(N * s, n)
            g = spec.g_stack(flat_t, flat_y)
            fv = spec.f_stack(flat_t, flat_y)
            F = (fv + np.matmul(g, u_flat[:, :, None])[:, :, 0]).reshape(N, s, n)
            if not need_jac:
                return F, None
            Dg = spec.Dg_stack(flat_t, flat_y)
            Df = spec.Df_stack(flat_t, flat_y)
            J = (Df + np.einsum("bjil,bi->bjl", Dg, u_flat)).reshape(N, s, n, n)
            Mb = np.zeros((N, s * n, s * n))
            for i in range(s):
                for j in range(s):
                    blk = -hA[i, j] * J[:, j]
                    if i == j:
                        blk = blk + eye[None]
                    Mb[:, i * n:(i + 1) * n, j * n:(j + 1) * n] = blk
            return F, Mb

        Z = (np.repeat(y[:, None, :], s, axis=1) if F is None
             else y[:, None, :] + ch * F[:, -1:, :])
        if M is None:
            F, M = eval_F(Z, True)
        else:
            F, _ = eval_F(Z, False)
        R = Z - y[:, None, :] - np.matmul(hA[None], F)
        norms = np.max(np.abs(R), axis=(1, 2))
        iters = 0
        refreshes = 0
        while np.max(norms) > tol:
            if not np.all(np.isfinite(norms)):
                bad = int(np.nonzero(~np.isfinite(norms))[0][0])
                raise OracleError(f"member {bad}: non-finite residual at step {k}")
            iters += 1
            if iters > max_iter:
                bad = int(np.argmax(norms))
                raise OracleError(f"member {bad}: no convergence at step {k}")
            dZ = np.linalg.solve(M, -R.reshape(N, s * n)[:, :, None])[:, :, 0]
            dZ = dZ.reshape(N, s, n)
            remaining = norms > tol
            lam = np.ones(N)
            for _ in range(12):
                if not remaining.any():
                    break
                Z_try = Z + (lam * remaining)[:, None, None] * dZ
                F_try, _ = eval_F(Z_try, False)
                R_try = Z_try - y[:, None, :] - np.matmul(hA[None], F_try)
                with np.errstate(invalid="ignore"):
                    nt = np.max(np.abs(R_try), axis=(1, 2))
                    improved = remaining & ((nt < norms) | (nt <= tol))
                if improved.any():
                    Z[improved] = Z_try[improved]
                    F[improved] = F_try[improved]
                    R[improved] = R_try[improved]
                    norms[improved] = nt[improved]
                remaining &= ~improved
                lam[remaining] *= 0.5
            if remaining.any() or (iters % 6 == 0 and np.max(norms) > tol):
                if refreshes >= 3:
                    bad = int(np.argmax(norms))
                    raise OracleError(f"member {bad}: Newton stalled at step {k}")
                refreshes += 1
                F, M = eval_F(Z, True)
                R = Z - y[:, None, :] - np.matmul(hA[None], F)
                norms = np.max(np.abs(R), axis=(1, 2))
        y = Z[:, -1, :].copy()
        if np.any(np.linalg.norm(y, axis=1) > blowup):
            bad = int(np.argmax(np.linalg.norm(y, axis=1)))
            raise OracleError(f"member {bad}: state blow-up at step {k}")
        out[:, k + 1] = y
    return out


def _ensemble_adjoints(spec, Ys, U, grid, lin_method="cn"):
    """Backward adjoint solves for all members, batched per time step."""
    N = Ys.shape[0]
    n = spec.n
    h = grid.h
    eye = np.eye(n)
    ydn = spec.y_d_nodes(grid)
    P = np.empty_like(Ys)
    P[:, -1] = (Ys[:, -1] - ydn[-1]) @ (spec.alpha * spec.Q2tQ2).T

    def a_nodes(k):
        ts = np.full(N, grid.nodes[k])
        Df = spec.Df_stack(ts, Ys[:, k])
        Dg = spec.Dg_stack(ts, Ys[:, k])
        return (np.swapaxes(Df, 1, 2)
                + np.einsum("bjil,bi->blj", Dg, U[:, k]))

    A_next = a_nodes(grid.n_steps)
    for k in range(grid.n_steps - 1, -1, -1):
        A_here = a_nodes(k)
        q_here = (Ys[:, k] - ydn[k]) @ spec.Q1tQ1.T
        q_next = (Ys[:, k + 1] - ydn[k + 1]) @ spec.Q1tQ1.T
        if lin_method == "cn":
            lhs = eye[None] - 0.5 * h * A_here
            rhs = (np.matmul(eye[None] + 0.5 * h * A_next, P[:, k + 1][:, :, None])[:, :, 0]
                   + 0.5 * h * (q_here + q_next))
        else:
            lhs = eye[None] - h * A_here
            rhs = P[:, k + 1] + h * q_here
        P[:, k] = np.linalg.solve(lhs, rhs[:, :, None])[:, :, 0]
        A_next = A_here
    return P


def solve_open_loop_ensemble(spec: ProblemSpec, Y0s, grid: TimeGrid,
                             bb_config: BBConfig, state_method="radau3"):
    """Stationary open-loop triples for many initial conditions at once.

    BB runs on the stacked control vector; the objective is separable over
    members, so the stationary points coincide with per-member solves while
    every linear-algebra pass is batched.
    """
    Y0s = np.atleast_2d(np.asarray(Y0s, float))
    N = Y0s.shape[0]
    shape = (N, grid.n_nodes, spec.m)
    ydn = spec.y_d_nodes(grid)
    tw = grid.trapezoid_weights()

    def costs(U, Ys):
        r = (Ys - ydn[None]) @ spec.Q1.T
        track = np.einsum("Nki,Nki->Nk", r, r)
        ctrl = np.einsum("Nki,Nki->Nk", U, U)
        run = 0.5 * (track + spec.beta * ctrl) @ tw
        rT = (Ys[:, -1] - spec.y_dT) @ spec.Q2.T
        return run + 0.5 * spec.alpha * np.einsum("Ni,Ni->N", rT, rT)

    def grad_nodes(U, Ys, P):
        G = spec.beta * U.copy()
        for k in range(grid.n_nodes):
            ts = np.full(N, grid.nodes[k])
            g = spec.g_stack(ts, Ys[:, k])
            G[:, k] += np.matmul(np.swapaxes(g, 1, 2), P[:, k][:, :, None])[:, :, 0]
        return G

    def fun_grad(uflat):
        U = uflat.reshape(shape)
        try:
            Ys = _ensemble_states(spec, U, Y0s, grid, method=state_method)
        except OracleError:
            return np.inf, None
        P = _ensemble_adjoints(spec, Ys, U, grid)
        return float(np.sum(costs(U, Ys))), grad_nodes(U, Ys, P).ravel()

    def f_only(uflat):
        U = uflat.reshape(shape)
        try:
            Ys = _ensemble_states(spec, U, Y0s, grid, method=state_method)
        except OracleError:
            return np.inf
        return float(np.sum(costs(U, Ys)))

    try:
        u_star, _ = bb_minimize(fun_grad, np.zeros(N * grid.n_nodes * spec.m),
                                bb_config, f_only=f_only)
    except RuntimeError as exc:
        raise OracleError(f"ensemble open-loop solve failed: {exc}") from exc
    U = u_star.reshape(shape)
    Ys = _ensemble_states(spec, U, Y0s, grid, method=state_method)
    P = _ensemble_adjoints(spec, Ys, U, grid)
    J = costs(U, Ys)
    return [OracleTriple(y=StateTrajectory(grid, Ys[i]),
                         u=ControlTrajectory(grid, U[i]),
                         p=Trajectory(grid, P[i]),
                         J=float(J[i]))
            for i in range(N)]


def riccati_solve(lqr: LQRSpec, grid: TimeGrid) -> np.ndarray:
    """Backward implicit Euler on the matrix Riccati equation.

    -dPi/dt = A^T Pi + Pi A - (1/beta) Pi B B^T Pi + Q1^T Q1, with
    Pi(T) = alpha Q2^T Q2. Returns (n_nodes, n, n), symmetric at every node.
    """
    A = lqr.A_lin
    n = lqr.n
    S = (lqr.B @ lqr.B.T) / lqr.beta
    Q = np.asarray(lqr.Q1, float).T @ np.asarray(lqr.Q1, float)
    h = grid.h
    eye_n = np.eye(n)
    eye_v = np.eye(n * n)
    Pi = np.empty((grid.n_nodes, n, n))
    Pi[-1] = lqr.alpha * (np.asarray(lqr.Q2, float).T @ np.asarray(lqr.Q2, float))
    for k in range(grid.n_steps - 1, -1, -1):
        X = Pi[k + 1].copy()
        target = Pi[k + 1]
        for it in range(50):
            R = X - target - h * (A.T @ X + X @ A - X @ S @ X + Q)
            if not np.all(np.isfinite(R)):
                raise OracleError(f"Riccati blow-up at node {k}")
            if np.max(np.abs(R)) <= 1e-13 * max(1.0, np.max(np.abs(X))):
                break
            M = eye_v - h * (np.kron(A.T, eye_n) + np.kron(eye_n, A.T)
                             - np.kron(eye_n, (S @ X).T) - np.kron(X @ S, eye_n))
            try:
                dX = np.linalg.solve(M, -R.ravel()).reshape(n, n)
            except np.linalg.LinAlgError as exc:
                raise OracleError(f"singular Riccati Newton matrix at node {k}") from exc
            X = X + dX
        else:
            raise OracleError(f"Riccati Newton did not converge at node {k}")
        Pi[k] = 0.5 * (X + X.T)
    return Pi


def riccati_feedback_rollout(lqr: LQRSpec, Pi: np.ndarray, y0, grid: TimeGrid):
    """Closed-loop rollout y' = (A - (1/beta) B B^T Pi(t)) y and its cost."""
    A, B = lqr.A_lin, lqr.B
    n = lqr.n
    h = grid.h
    S = (B @ B.T) / lqr.beta
    Y = np.empty((grid.n_nodes, n))
    Y[0] = np.asarray(y0, float).ravel()
    eye = np.eye(n)
    for k in range(grid.n_steps):
        M = eye - h * (A - S @ Pi[k + 1])
        Y[k + 1] = np.linalg.solve(M, Y[k])
    U = -(1.0 / lqr.beta) * np.einsum("ij,kjl,kl->ki", B.T, Pi, Y)
    y = StateTrajectory(grid, Y)
    u = ControlTrajectory(grid, U)
    return y, u, running_cost(lqr.problem_spec(), y, u)


# --------------------------------------------------------------------------
# persistence of oracle triples
# --------------------------------------------------------------------------

@dataclass
class OracleTriple:
    y: StateTrajectory
    u: ControlTrajectory
    p: Trajectory
    J: float

    def cost_to_go(self, spec: ProblemSpec) -> np.ndarray:
        return cost_to_go(spec, self.y, self.u)


def save_oracle_triples(directory, triples) -> None:
    os.makedirs(directory, exist_ok=True)
    summary = []
    for i, tr in enumerate(triples):
        for tag, traj in (("y", tr.y), ("u", tr.u), ("p", tr.p)):
            traj.to_csv(os.path.join(directory, f"member_{i:03d}_{tag}.csv"))
        summary.append({"member": i, "J": tr.J})
    with open(os.path.join(directory, "summary.json"), "w") as fh:
        json.dump(summary, fh)


def load_oracle_triples(directory) -> list:
    with open(os.path.join(directory, "summary.json")) as fh:
        summary = json.load(fh)
    out = []
    for row in summary:
        i = row["member"]
        y = StateTrajectory.from_csv(os.path.join(directory, f"member_{i:03d}_y.csv"))
        u = ControlTrajectory.from_csv(os.path.join(directory, f"member_{i:03d}_u.csv"))
        p = Trajectory.from_csv(os.path.join(directory, f"member_{i:03d}_p.csv"))
        out.append(OracleTriple(y=y, u=u, p=p, J=float(row["J"])))
    return out
