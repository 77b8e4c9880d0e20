"""Shared domain types: time grids, trajectories, problem data, ensembles.

Everything here is immutable after construction so that ensemble workers can
share instances without locking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


# --------------------------------------------------------------------------
# error taxonomy
# --------------------------------------------------------------------------

class ConfigurationError(ValueError):
    """Invalid grid/problem/run configuration."""


class ContractError(ValueError):
    """Caller violated an interface contract (e.g. mismatched grids)."""


class SolverError(RuntimeError):
    """An implicit step failed to converge (carries the step index)."""


class DivergenceError(RuntimeError):
    """State norm exceeded the blow-up monitor during integration."""


class OracleError(RuntimeError):
    """Reference (open-loop / Riccati) computation failed."""


class MetricError(ValueError):
    """Degenerate input to a validation metric (zero denominator)."""


class CapabilityError(ValueError):
    """Requested configuration outside the supported envelope."""


def _frozen(a) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# time grid and quadrature
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, T] with n_steps intervals (n_steps+1 nodes)."""

    T: float
    n_steps: int
    nodes: np.ndarray

    @property
    def h(self) -> float:
        return self.T / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n_nodes, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w


def make_uniform_grid(T: float, n_steps: int) -> TimeGrid:
    """Uniform grid with exact endpoints 0 and T."""
    if not (T > 0.0):
        raise ConfigurationError(f"horizon must be positive, got T={T}")
    if n_steps < 1:
        raise ConfigurationError(f"need at least one step, got n_steps={n_steps}")
    nodes = np.linspace(0.0, float(T), n_steps + 1)
    return TimeGrid(T=float(T), n_steps=int(n_steps), nodes=_frozen(nodes))


def trapezoid(values: np.ndarray, grid: TimeGrid) -> np.ndarray | float:
    """Composite trapezoid rule over the grid; integrates axis 0."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != grid.n_nodes:
        raise ContractError("values do not match grid node count")
    w = grid.trapezoid_weights()
    if values.ndim == 1:
        return float(w @ values)
    return np.tensordot(w, values, axes=(0, 0))


def cumtrapz_forward(values: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """F_k = integral from 0 to t_k (trapezoid), F_0 = 0."""
    values = np.asarray(values, dtype=float)
    if values.shape[0] != grid.n_nodes:
        raise ContractError("values do not match grid node count")
    seg = 0.5 * grid.h * (values[1:] + values[:-1])
    out = np.zeros_like(values)
    out[1:] = np.cumsum(seg, axis=0)
    return out


def cumtrapz_backward(values: np.ndarray, grid: TimeGrid) -> np.ndarray:
    """B_k = integral from t_k to T (trapezoid), B_last = 0."""
    total = cumtrapz_forward(values, grid)
    return total[-1] - total


# --------------------------------------------------------------------------
# trajectories
# --------------------------------------------------------------------------

class Trajectory:
    """Time-gridded array: one row of width d per grid node."""

    def __init__(self, grid: TimeGrid, values: np.ndarray):
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[0] != grid.n_nodes:
            raise ContractError(
                f"trajectory has {values.shape[0]} rows, grid has {grid.n_nodes} nodes"
            )
        if not np.all(np.isfinite(values)):
            raise ContractError("trajectory values must be finite")
        self.grid = grid
        self.values = _frozen(values)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Trajectory)
            and np.array_equal(self.grid.nodes, other.grid.nodes)
            and np.array_equal(self.values, other.values)
        )

    def to_csv(self, path) -> None:
        """Write `t,<comp_0>,...` rows at full double precision."""
        header = ",".join(["t"] + [f"comp_{i}" for i in range(self.dim)])
        with open(path, "w") as fh:
            fh.write(header + "\n")
            for t, row in zip(self.grid.nodes, self.values):
                fh.write(",".join(f"{v:.17g}" for v in (t, *row)) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        t = data[:, 0]
        n_steps = len(t) - 1
        if n_steps < 1:
            raise ContractError("trajectory file needs at least two nodes")
        grid = TimeGrid(T=float(t[-1]), n_steps=n_steps, nodes=_frozen(t))
        return cls(grid, data[:, 1:])


class StateTrajectory(Trajectory):
    pass


class AdjointTrajectory(Trajectory):
    pass


class ControlTrajectory(Trajectory):
    pass


class CostateTrajectory(Trajectory):
    pass


# --------------------------------------------------------------------------
# problem data
# --------------------------------------------------------------------------

def _check_weight(Q: np.ndarray, name: str, n: int) -> np.ndarray:
    Q = np.asarray(Q, dtype=float)
    if Q.shape != (n, n):
        raise ConfigurationError(f"{name} must be {n}x{n}, got {Q.shape}")
    if np.max(np.abs(Q - Q.T)) > 1e-12 * max(1.0, np.max(np.abs(Q))):
        raise ConfigurationError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise ConfigurationError(f"{name} must be positive semi-definite")
    return _frozen(Q)


@dataclass(frozen=True)
class ProblemSpec:
    """Control-affine tracking problem on [0, T].

    Dynamics dy/dt = f(t, y) + g(t, y) u with running cost
    (1/2)|Q1 (y - y_d)|^2 + (beta/2)|u|^2 and terminal cost
    (alpha/2)|Q2 (y(T) - y_dT)|^2.

    Derivative callback layouts (i: output, j: control, k/l: state):
      Df(t, y)   -> (n, n)        Df[i, k]       = d f_i / d y_k
      Dg(t, y)   -> (n, m, n)     Dg[i, j, k]    = d g_ij / d y_k
      Dyyf(t, y) -> (n, n, n)     Dyyf[i, k, l]  = d^2 f_i / d y_k d y_l
      Dyyg(t, y) -> (n, m, n, n)  Dyyg[i, j, k, l]
    """

    n: int
    m: int
    T: float
    beta: float
    alpha: float
    Q1: np.ndarray
    Q2: np.ndarray
    y_d: Callable[[float], np.ndarray]
    y_dT: np.ndarray
    f: Callable[[float, np.ndarray], np.ndarray]
    g: Callable[[float, np.ndarray], np.ndarray]
    Df: Callable[[float, np.ndarray], np.ndarray]
    Dg: Callable[[float, np.ndarray], np.ndarray]
    Dyyf: Callable[[float, np.ndarray], np.ndarray] = None
    Dyyg: Callable[[float, np.ndarray], np.ndarray] = None
    # optional vectorized forms (ts, Ys) -> stacked arrays; pointwise fallback
    f_batch: Callable = None
    g_batch: Callable = None
    Df_batch: Callable = None
    Dg_batch: Callable = None

    def __post_init__(self):
        if self.beta <= 0:
            raise ConfigurationError("beta must be positive")
        if self.alpha < 0:
            raise ConfigurationError("alpha must be nonnegative")
        if self.T <= 0:
            raise ConfigurationError("horizon T must be positive")
        object.__setattr__(self, "Q1", _check_weight(self.Q1, "Q1", self.n))
        object.__setattr__(self, "Q2", _check_weight(self.Q2, "Q2", self.n))
        object.__setattr__(self, "y_dT", _frozen(np.asarray(self.y_dT, float).reshape(self.n)))
        object.__setattr__(self, "Q1tQ1", _frozen(self.Q1.T @ self.Q1))
        object.__setattr__(self, "Q2tQ2", _frozen(self.Q2.T @ self.Q2))
        object.__setattr__(self, "dyyf_zero", self.Dyyf is None)
        object.__setattr__(self, "dyyg_zero", self.Dyyg is None)
        if self.Dyyf is None:
            zf = _frozen(np.zeros((self.n, self.n, self.n)))
            object.__setattr__(self, "Dyyf", lambda t, y: zf)
        if self.Dyyg is None:
            zg = _frozen(np.zeros((self.n, self.m, self.n, self.n)))
            object.__setattr__(self, "Dyyg", lambda t, y: zg)

    def y_d_nodes(self, grid: TimeGrid) -> np.ndarray:
        """Desired state sampled at all grid nodes, shape (n_nodes, n)."""
        return np.stack([np.asarray(self.y_d(t), float).reshape(self.n) for t in grid.nodes])

    def f_stack(self, ts, Ys) -> np.ndarray:
        if self.f_batch is not None:
            return self.f_batch(ts, Ys)
        return np.stack([self.f(t, y) for t, y in zip(ts, Ys)])

    def g_stack(self, ts, Ys) -> np.ndarray:
        if self.g_batch is not None:
            return self.g_batch(ts, Ys)
        return np.stack([self.g(t, y) for t, y in zip(ts, Ys)])

    def Df_stack(self, ts, Ys) -> np.ndarray:
        if self.Df_batch is not None:
            return self.Df_batch(ts, Ys)
        return np.stack([self.Df(t, y) for t, y in zip(ts, Ys)])

    def Dg_stack(self, ts, Ys) -> np.ndarray:
        if self.Dg_batch is not None:
            return self.Dg_batch(ts, Ys)
        return np.stack([self.Dg(t, y) for t, y in zip(ts, Ys)])

    def terminal_cost(self, yT: np.ndarray) -> float:
        r = self.Q2 @ (yT - self.y_dT)
        return 0.5 * self.alpha * float(r @ r)

    def terminal_adjoint(self, yT: np.ndarray) -> np.ndarray:
        return self.alpha * (self.Q2tQ2 @ (yT - self.y_dT))


@dataclass(frozen=True)
class PenaltyConfig:
    """Dynamic-programming penalty weights and the Tikhonov weight on theta.

    phi_terminal selects the coefficient of the terminal source term:
    'derived_T' uses the accumulated mismatch at time T, 'paper_zero' uses
    its value at 0 (identically zero); the FD gradient check arbitrates.
    """

    gamma1: float = 0.0
    gamma2: float = 0.0
    gamma_eps: float = 0.0
    phi_terminal: str = "derived_T"

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0 or self.gamma_eps < 0:
            raise ConfigurationError("penalty weights must be nonnegative")
        if self.phi_terminal not in ("derived_T", "paper_zero"):
            raise ConfigurationError(f"unknown phi_terminal '{self.phi_terminal}'")


# --------------------------------------------------------------------------
# ensembles of initial conditions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EnsembleSet:
    """Initial conditions with weights and train/validation tags."""

    points: np.ndarray          # (N, n)
    weights: np.ndarray         # (N,)
    tags: tuple                 # 'train' | 'validation' per point
    seed: int
    center: np.ndarray = None   # sampling ball center (diagnostics)
    radius: float = np.inf      # sampling ball radius

    def __post_init__(self):
        pts = _frozen(np.atleast_2d(np.asarray(self.points, float)))
        w = _frozen(np.asarray(self.weights, float))
        tags = tuple(self.tags)
        if pts.shape[0] != w.shape[0] or pts.shape[0] != len(tags):
            raise ConfigurationError("points, weights, tags must have equal length")
        if np.any(w <= 0):
            raise ConfigurationError("ensemble weights must be positive")
        if any(t not in ("train", "validation") for t in tags):
            raise ConfigurationError("tags must be 'train' or 'validation'")
        train_w = sum(wi for wi, t in zip(w, tags) if t == "train")
        if abs(train_w - 1.0) > 1e-12:
            raise ConfigurationError("train weights must sum to 1")
        if self.center is not None:
            c = np.asarray(self.center, float)
            d = np.linalg.norm(pts - c[None, :], axis=1)
            if np.any(d > self.radius * (1 + 1e-12)):
                raise ConfigurationError("ensemble point outside sampling ball")
            object.__setattr__(self, "center", _frozen(c))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "tags", tags)

    def split(self, tag: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(indices, points, weights) of one split, in stored order."""
        idx = np.array([i for i, t in enumerate(self.tags) if t == tag], dtype=int)
        return idx, self.points[idx], self.weights[idx]

    @property
    def n_train(self) -> int:
        return sum(1 for t in self.tags if t == "train")
