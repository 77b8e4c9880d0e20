"""Value-model contract, the induced feedback law, and theta persistence.

A value model V(theta, t, y) always satisfies the terminal identity
V(theta, T, y) = (alpha/2)|Q2 (y - y_dT)|^2 by construction; the feedback
law is F = -(1/beta) g(t, y)^T dV/dy.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from ..core_types import ConfigurationError, ProblemSpec


@dataclass
class ModelEval:
    """All model derivatives at one (t, y)."""

    value: float
    grad_y: np.ndarray        # (n,)
    hess_yy: np.ndarray       # (n, n)
    grad_theta: np.ndarray    # (N_theta,)
    grad_y_theta: np.ndarray  # (n, N_theta)


@dataclass
class ModelNodeCache:
    """Model derivatives batched over grid nodes (leading axis = node)."""

    value: np.ndarray         # (K,)
    grad_y: np.ndarray        # (K, n)
    hess_yy: np.ndarray       # (K, n, n)
    grad_theta: np.ndarray    # (K, N_theta)
    grad_y_theta: np.ndarray  # (K, n, N_theta)


class ValueModel(ABC):
    """Finitely parametrized value-function surrogate.

    Subclasses fix the parameter layout and provide the five derivative
    operations; the quadratic terminal head (alpha, Q2, y_dT) is shared.
    """

    def __init__(self, n: int, alpha: float, Q2: np.ndarray, y_dT: np.ndarray):
        self.n = int(n)
        self.alpha = float(alpha)
        self.Q2 = np.asarray(Q2, dtype=float)
        self.y_dT = np.asarray(y_dT, dtype=float).reshape(self.n)
        self.Q2tQ2 = self.Q2.T @ self.Q2

    # -- terminal quadratic head ------------------------------------------
    def head_value(self, y) -> np.ndarray:
        r = (np.atleast_2d(y) - self.y_dT) @ self.Q2.T
        return 0.5 * self.alpha * np.einsum("bi,bi->b", r, r)

    def head_grad(self, y) -> np.ndarray:
        return self.alpha * (np.atleast_2d(y) - self.y_dT) @ self.Q2tQ2.T

    # -- contract ----------------------------------------------------------
    @property
    @abstractmethod
    def n_params(self) -> int: ...

    @abstractmethod
    def default_theta(self, rng: np.random.Generator) -> np.ndarray:
        """Initial parameter vector for training."""

    @abstractmethod
    def eval_all(self, theta, t, y) -> ModelEval: ...

    def value(self, theta, t, y) -> float:
        return self.eval_all(theta, t, y).value

    def grad_y(self, theta, t, y) -> np.ndarray:
        return self.eval_all(theta, t, y).grad_y

    def hess_yy(self, theta, t, y) -> np.ndarray:
        return self.eval_all(theta, t, y).hess_yy

    def grad_theta(self, theta, t, y) -> np.ndarray:
        return self.eval_all(theta, t, y).grad_theta

    def grad_y_theta(self, theta, t, y) -> np.ndarray:
        return self.eval_all(theta, t, y).grad_y_theta

    def value_and_grad_y(self, theta, t, y) -> tuple[float, np.ndarray]:
        """Cheap path for ODE stepping (no theta derivatives)."""
        ev = self.eval_all(theta, t, y)
        return ev.value, ev.grad_y

    def grad_y_and_hess(self, theta, t, y) -> tuple[np.ndarray, np.ndarray]:
        ev = self.eval_all(theta, t, y)
        return ev.grad_y, ev.hess_yy

    def eval_nodes(self, theta, ts, Y) -> ModelNodeCache:
        """Batched evaluation along a trajectory; default loops eval_all."""
        evs = [self.eval_all(theta, t, y) for t, y in zip(ts, Y)]
        return ModelNodeCache(
            value=np.array([e.value for e in evs]),
            grad_y=np.stack([e.grad_y for e in evs]),
            hess_yy=np.stack([e.hess_yy for e in evs]),
            grad_theta=np.stack([e.grad_theta for e in evs]),
            grad_y_theta=np.stack([e.grad_y_theta for e in evs]),
        )

    def grad_y_batch(self, theta, ts, Y) -> np.ndarray:
        """dV/dy at several (t, y) points, shape (B, n)."""
        return np.stack([self.value_and_grad_y(theta, t, y)[1]
                         for t, y in zip(ts, Y)])

    def value_grad_y_batch(self, theta, ts, Y):
        """(V, dV/dy) at several points, shapes (B,), (B, n)."""
        pairs = [self.value_and_grad_y(theta, t, y) for t, y in zip(ts, Y)]
        return (np.array([p[0] for p in pairs]),
                np.stack([p[1] for p in pairs]))

    def eval_nodes_x(self, theta, ts, Y):
        """(V, dV/dy, d2V/dy2) batched; the state-only part of eval_nodes."""
        evs = [self.eval_all(theta, t, y) for t, y in zip(ts, Y)]
        return (np.array([e.value for e in evs]),
                np.stack([e.grad_y for e in evs]),
                np.stack([e.hess_yy for e in evs]))

    def make_xeval(self, theta):
        """Closure (ts, Ys, need_hess) -> (vy, vyy|None) with setup hoisted."""
        theta = self.check_theta(theta)

        def xeval(ts, Ys, need_hess):
            if need_hess:
                return self.grad_hess_batch(theta, ts, Ys)
            return self.grad_y_batch(theta, ts, Ys), None

        return xeval

    def theta_vjp(self, theta, ts, Y, w_value, w_grady) -> np.ndarray:
        """sum_k w_value[k] dV/dtheta + sum_kj w_grady[k,j] d2V/(dy_j dtheta).

        The whole theta-gradient of the learning objective is a contraction
        of this form, so subclasses may override with a reverse sweep that
        never materializes the (B, n, N_theta) mixed derivative.
        """
        mc = self.eval_nodes(theta, ts, Y)
        return (np.einsum("kp,k->p", mc.grad_theta, np.asarray(w_value, float))
                + np.einsum("kjp,kj->p", mc.grad_y_theta, np.asarray(w_grady, float)))

    def grad_hess_batch(self, theta, ts, Y):
        """(dV/dy, d2V/dy2) at several points, shapes (B, n), (B, n, n)."""
        pairs = [self.grad_y_and_hess(theta, t, y) for t, y in zip(ts, Y)]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def check_theta(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.shape[0] != self.n_params:
            raise ConfigurationError(
                f"theta has {theta.shape[0]} entries, model expects {self.n_params}"
            )
        return theta

    # -- persistence ---------------------------------------------------------
    def metadata(self) -> dict:
        return {}

    family = "abstract"


# --------------------------------------------------------------------------
# feedback law F = -(1/beta) g^T dV/dy and its derivatives
# --------------------------------------------------------------------------

def feedback(spec: ProblemSpec, model: ValueModel, theta, t, y) -> np.ndarray:
    """Control produced by the parametrized feedback law at (t, y)."""
    _, vy = model.value_and_grad_y(theta, t, y)
    return -(1.0 / spec.beta) * (spec.g(t, y).T @ vy)


def feedback_dy(spec: ProblemSpec, model: ValueModel, theta, t, y):
    """(F, D_y F) at a point; D_y F is (m, n)."""
    vy, vyy = model.grad_y_and_hess(theta, t, y)
    g = spec.g(t, y)
    Dg = spec.Dg(t, y)
    F = -(1.0 / spec.beta) * (g.T @ vy)
    DyF = -(1.0 / spec.beta) * (np.einsum("jil,j->il", Dg, vy) + g.T @ vyy)
    return F, DyF


def feedback_full(spec: ProblemSpec, model: ValueModel, theta, t, y):
    """(F, D_y F, D_theta F) at a point; D_theta F is (m, N_theta)."""
    ev = model.eval_all(theta, t, y)
    g = spec.g(t, y)
    Dg = spec.Dg(t, y)
    inv = -(1.0 / spec.beta)
    F = inv * (g.T @ ev.grad_y)
    DyF = inv * (np.einsum("jil,j->il", Dg, ev.grad_y) + g.T @ ev.hess_yy)
    DthF = inv * (g.T @ ev.grad_y_theta)
    return F, DyF, DthF


# --------------------------------------------------------------------------
# theta persistence (JSON, exact float round-trip)
# --------------------------------------------------------------------------

def save_theta(path, model: ValueModel, theta) -> None:
    theta = model.check_theta(theta)
    doc = {
        "family": model.family,
        "metadata": model.metadata(),
        "n_params": model.n_params,
        "theta": [float(v) for v in theta],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_theta(path, model: ValueModel) -> np.ndarray:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("family") != model.family:
        raise ConfigurationError(
            f"theta file is for family '{doc.get('family')}', model is '{model.family}'"
        )
    theta = np.asarray(doc["theta"], dtype=float)
    if theta.shape[0] != model.n_params:
        raise ConfigurationError(
            f"theta file has {theta.shape[0]} parameters, model expects {model.n_params}"
        )
    return theta
