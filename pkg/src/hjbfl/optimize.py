"""Barzilai-Borwein gradient descent with step safeguards.

The step length is the secant curvature estimate (BB1 or BB2, optionally
alternating by iteration parity), clamped to a configured interval. The
method is intentionally nonmonotone: the only backtracking is halving the
step while the trial objective is non-finite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_types import ConfigurationError


@dataclass(frozen=True)
class BBConfig:
    max_iters: int = 5000
    grad_tol: float = 1e-6
    step_init: float = 1.0
    step_min: float = 1e-12
    step_max: float = 1e3
    variant: str = "alternating"        # BB1 | BB2 | alternating
    nonmonotone_window: int = 10

    def __post_init__(self):
        if not (0 < self.step_min <= self.step_init <= self.step_max):
            raise ConfigurationError("need 0 < step_min <= step_init <= step_max")
        if self.max_iters < 1:
            raise ConfigurationError("max_iters must be at least 1")
        if self.variant not in ("BB1", "BB2", "alternating"):
            raise ConfigurationError(f"unknown BB variant '{self.variant}'")


@dataclass
class BBTrace:
    iters: list = field(default_factory=list)
    values: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    def append(self, k, f, gnorm, step):
        self.iters.append(int(k))
        self.values.append(float(f))
        self.grad_norms.append(float(gnorm))
        self.steps.append(float(step))

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("iter,f,grad_norm,step\n")
            for row in zip(self.iters, self.values, self.grad_norms, self.steps):
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


def _bb_step(k, s, ydiff, config):
    ss = float(s @ s)
    sy = float(s @ ydiff)
    yy = float(ydiff @ ydiff)
    variant = config.variant
    if variant == "alternating":
        variant = "BB1" if k % 2 == 1 else "BB2"
    if variant == "BB1":
        tau = ss / sy if sy > 0 else np.nan
    else:
        tau = sy / yy if yy > 0 and sy > 0 else np.nan
    if not np.isfinite(tau) or tau <= 0:
        tau = config.step_init
    return min(max(tau, config.step_min), config.step_max)


def bb_minimize(fun_grad, x0, config: BBConfig, f_only=None, callback=None):
    """Minimize via BB steps; fun_grad(x) -> (f, grad).

    f_only(x), when given, is a cheaper objective-only evaluation used while
    backtracking out of non-finite trial points. Returns (x, trace).
    """
    if f_only is None:
        f_only = lambda x: fun_grad(x)[0]
    x = np.asarray(x0, dtype=float).copy()
    f, g = fun_grad(x)
    if not np.isfinite(f) or not np.all(np.isfinite(g)):
        raise ConfigurationError("objective or gradient not finite at the start point")
    gnorm = float(np.linalg.norm(g))
    trace = BBTrace()
    trace.append(0, f, gnorm, 0.0)
    if callback:
        callback(0, x, f, gnorm)
    if gnorm <= config.grad_tol:
        return x, trace

    tau = config.step_init
    for k in range(1, config.max_iters + 1):
        x_new = x - tau * g
        f_new, g_new = fun_grad(x_new)
        halvings = 0
        while not np.isfinite(f_new):
            halvings += 1
            if halvings > 30:
                raise RuntimeError(
                    f"BB iteration {k}: objective stayed non-finite after 30 halvings "
                    f"(last step {tau:.3e})"
                )
            tau *= 0.5
            x_new = x - tau * g
            if np.isfinite(f_only(x_new)):
                f_new, g_new = fun_grad(x_new)
        s = x_new - x
        ydiff = g_new - g
        x, f, g = x_new, f_new, g_new
        gnorm = float(np.linalg.norm(g))
        trace.append(k, f, gnorm, tau)
        if callback:
            callback(k, x, f, gnorm)
        if gnorm <= config.grad_tol:
            break
        tau = _bb_step(k, s, ydiff, config)
    return x, trace
