"""Spectral assembly of the bilinear parabolic control benchmark.

The 1-d heat equation on (0, 2*pi) with homogeneous Dirichlet conditions and
three bilinear actuators is projected onto the first n Laplacian
eigenfunctions phi_j(x) = sin(j x / 2) / sqrt(pi), lambda_j = j^2 / 4. All
matrix entries and the projected desired state x^2/10 have closed forms
(product-to-sum and integration by parts); tests cross-check them against
adaptive quadrature.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .core_types import ConfigurationError, EnsembleSet, ProblemSpec

SUBDOMAINS = ((0.5, 1.0), (2.0, 2.5), (4.0, 4.5))
T_HORIZON = 2.0
BETA = 0.01
ALPHA = 0.25


@dataclass(frozen=True)
class BilinearSpec:
    n_modes: int
    A: np.ndarray          # diagonal (n,) of Laplacian eigenvalues
    M: np.ndarray          # (3, n, n) actuator mass matrices
    Yd: np.ndarray         # (n,) projected desired state (time-independent)
    Ybar0: np.ndarray      # (n,) reference initial mode vector

    def content_hash(self) -> str:
        payload = json.dumps({
            "n_modes": self.n_modes,
            "A": self.A.tolist(), "M": self.M.tolist(),
            "Yd": self.Yd.tolist(), "Ybar0": self.Ybar0.tolist(),
        }, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def eigenvalue(j: int) -> float:
    return 0.25 * j * j


def eigenfunction(j: int, x):
    return np.sin(0.5 * j * np.asarray(x)) / np.sqrt(np.pi)


def mass_entry(j: int, k: int, a: float, b: float) -> float:
    """Closed form of (1/pi) * integral_a^b sin(jx/2) sin(kx/2) dx."""
    if j == k:
        prim = lambda x: 0.5 * x - np.sin(j * x) / (2.0 * j)
    else:
        prim = lambda x: (np.sin(0.5 * (j - k) * x) / (j - k)
                          - np.sin(0.5 * (j + k) * x) / (j + k))
    return (prim(b) - prim(a)) / np.pi


def desired_coefficient(j: int) -> float:
    """Mode coefficient of x^2/10 against phi_j (integration by parts)."""
    sign = -1.0 if j % 2 else 1.0
    integral = sign * (16.0 / j ** 3 - 8.0 * np.pi ** 2 / j) - 16.0 / j ** 3
    return integral / (10.0 * np.sqrt(np.pi))


def project_desired(n_modes: int, t: float = 0.0) -> np.ndarray:
    """Projected desired state; the target is time-independent."""
    return np.array([desired_coefficient(j) for j in range(1, n_modes + 1)])


def assemble(n_modes: int = 10) -> BilinearSpec:
    if n_modes < 1:
        raise ConfigurationError("need at least one mode")
    lam = np.array([eigenvalue(j) for j in range(1, n_modes + 1)])
    M = np.empty((3, n_modes, n_modes))
    for i, (a, b) in enumerate(SUBDOMAINS):
        for j in range(1, n_modes + 1):
            for k in range(j, n_modes + 1):
                v = mass_entry(j, k, a, b)
                M[i, j - 1, k - 1] = v
                M[i, k - 1, j - 1] = v
    Ybar0 = np.zeros(n_modes)
    Ybar0[0] = np.sqrt(np.pi)            # projection of sin(x/2)
    return BilinearSpec(n_modes=n_modes, A=lam, M=M,
                        Yd=project_desired(n_modes), Ybar0=Ybar0)


def save_cache(spec: BilinearSpec, path) -> None:
    doc = {"n_modes": spec.n_modes, "A": spec.A.tolist(), "M": spec.M.tolist(),
           "Yd": spec.Yd.tolist(), "Ybar0": spec.Ybar0.tolist(),
           "hash": spec.content_hash()}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_cache(path) -> BilinearSpec:
    with open(path) as fh:
        doc = json.load(fh)
    spec = BilinearSpec(n_modes=int(doc["n_modes"]), A=np.asarray(doc["A"]),
                        M=np.asarray(doc["M"]), Yd=np.asarray(doc["Yd"]),
                        Ybar0=np.asarray(doc["Ybar0"]))
    if spec.content_hash() != doc.get("hash"):
        raise ConfigurationError(f"benchmark cache {path} is corrupted")
    return spec


def dynamics_callbacks(bspec: BilinearSpec, T=T_HORIZON, beta=BETA,
                       alpha=ALPHA) -> ProblemSpec:
    """ProblemSpec for dY/dt = -A Y - sum_i u_i M_i Y with identity weights."""
    n = bspec.n_modes
    lam = bspec.A
    M = bspec.M
    Dg_const = -np.transpose(M, (1, 0, 2))    # Dg[j, i, k] = -M[i][j, k]
    Df_const = -np.diag(lam)
    Yd = bspec.Yd

    return ProblemSpec(
        n=n, m=3, T=T, beta=beta, alpha=alpha,
        Q1=np.eye(n), Q2=np.eye(n),
        y_d=lambda t: Yd, y_dT=Yd,
        f=lambda t, y: -lam * y,
        g=lambda t, y: -np.einsum("ijk,k->ji", M, y),
        Df=lambda t, y: Df_const,
        Dg=lambda t, y: Dg_const,
        f_batch=lambda ts, Ys: -lam[None, :] * Ys,
        g_batch=lambda ts, Ys: -np.einsum("ijk,bk->bji", M, Ys),
        Df_batch=lambda ts, Ys: np.broadcast_to(Df_const, (len(Ys), n, n)),
        Dg_batch=lambda ts, Ys: np.broadcast_to(Dg_const, (len(Ys), n, 3, n)),
    )


def generate_ensemble(Ybar0, total: int, radius: float, seed: int,
                      train_count: int) -> EnsembleSet:
    """Uniform samples from the closed ball around Ybar0, split train/validation.

    The first train_count draws are the training set with uniform weights;
    radii scale like U^(1/n) so the sampling is uniform in volume.
    """
    Ybar0 = np.asarray(Ybar0, float).ravel()
    if train_count > total or train_count < 1:
        raise ConfigurationError("need 1 <= train_count <= total")
    n = Ybar0.size
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((total, n))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = radius * rng.uniform(0.0, 1.0, total) ** (1.0 / n)
    points = Ybar0[None, :] + radii[:, None] * dirs
    n_val = total - train_count
    weights = np.concatenate([
        np.full(train_count, 1.0 / train_count),
        np.full(n_val, 1.0 / n_val) if n_val else np.zeros(0),
    ])
    tags = ("train",) * train_count + ("validation",) * n_val
    return EnsembleSet(points=points, weights=weights, tags=tags, seed=seed,
                       center=Ybar0, radius=radius)
