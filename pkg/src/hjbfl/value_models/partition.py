"""Mollifier partition of unity blending local quadratic surrogates.

The covered box K = [-H, H]^(n+1) in (t, y) is tiled by hypercubes of side
eps with padding layers; a bump of radius r_eps sits at each barycenter and
the normalized bumps of the interior cells form the partition. The model
value blends per-center quadratics, shifted so the terminal condition holds
identically. Storage grows like (2*N_eps + 2k)^(n+1), so this family is a
low-dimensional verification vehicle (n <= 3), not a training workhorse.
"""

from __future__ import annotations

import itertools

import numpy as np

from ..core_types import CapabilityError, ConfigurationError
from .base import ModelEval, ValueModel


class PartitionPolyModel(ValueModel):
    """Blended local quadratics on a padded hypercube cover."""

    family = "partition_poly"

    def __init__(self, epsilon, n, cover_halfwidth, T, alpha=1.0, Q2=None, y_dT=None):
        if not (1 <= n <= 3):
            raise CapabilityError(
                f"partition model supports 1 <= n <= 3 (storage is exponential), got n={n}"
            )
        if epsilon <= 0 or cover_halfwidth <= 0:
            raise ConfigurationError("epsilon and cover_halfwidth must be positive")
        Q2 = np.eye(n) if Q2 is None else Q2
        y_dT = np.zeros(n) if y_dT is None else y_dT
        super().__init__(n=n, alpha=alpha, Q2=Q2, y_dT=y_dT)
        self.epsilon = float(epsilon)
        self.halfwidth = float(cover_halfwidth)
        self.T = float(T)
        d = n + 1
        self.dim = d
        # cell grid: ceil(H/eps) cells per half-axis, padded by k layers
        self.n_half = int(np.ceil(self.halfwidth / self.epsilon))
        self.pad = int(np.ceil(0.5 * np.sqrt(d))) + 1
        self.cells_per_dim = 2 * self.n_half + 2 * self.pad
        self.base = -(self.n_half + self.pad) * self.epsilon
        self.r_eps = self.epsilon * (0.5 * np.sqrt(d) + 0.1)
        n_cells = self.cells_per_dim ** d
        if n_cells > 2_000_000:
            raise CapabilityError(f"partition would need {n_cells} cells")

        shape = (self.cells_per_dim,) * d
        interior_id = -np.ones(shape, dtype=int)
        inner = slice(1, self.cells_per_dim - 1)
        interior_view = interior_id[(inner,) * d]
        interior_view[...] = np.arange(interior_view.size).reshape(interior_view.shape)
        self.interior_id = interior_id
        self.n_interior = int(interior_view.size)

        axis = self.base + (np.arange(self.cells_per_dim) + 0.5) * self.epsilon
        self.center_axis = axis
        idx = np.stack(np.meshgrid(*([np.arange(self.cells_per_dim)] * d),
                                   indexing="ij"), axis=-1).reshape(-1, d)
        interior_mask = np.all((idx >= 1) & (idx <= self.cells_per_dim - 2), axis=1)
        self.interior_centers = axis[idx[interior_mask]]

        self.block = d * (d + 1) // 2 + d + 1   # packed A, b, c per center
        iu = np.triu_indices(d)
        self._iu = iu
        self._pack_scale = np.where(iu[0] == iu[1], 1.0, 2.0)
        self.overlap_bound = None
        self.derivative_bound = None

    # -- parameter layout ----------------------------------------------------
    @property
    def n_params(self) -> int:
        return self.n_interior * self.block

    def default_theta(self, rng: np.random.Generator) -> np.ndarray:
        return np.zeros(self.n_params)

    def pack_center(self, A, b, c):
        """Flatten one (A, b, c) with A symmetric (d x d)."""
        A = np.asarray(A, float)
        return np.concatenate([A[self._iu], np.asarray(b, float).ravel(), [float(c)]])

    def unpack_center(self, theta, ordinal):
        d = self.dim
        blk = theta[ordinal * self.block:(ordinal + 1) * self.block]
        A = np.zeros((d, d))
        A[self._iu] = blk[: len(self._iu[0])]
        A = A + np.triu(A, 1).T
        b = blk[len(self._iu[0]): len(self._iu[0]) + d]
        c = blk[-1]
        return A, b, c

    # -- mollifier -------------------------------------------------------------
    def _psi(self, sq):
        """psi given squared distances; zero outside the open ball."""
        u = sq / self.r_eps ** 2
        out = np.zeros_like(u)
        inside = u < 1.0
        out[inside] = np.exp(1.0 / (u[inside] - 1.0))
        return out

    def _psi_derivs(self, diff):
        """(psi, Dpsi, D2psi) for rows of diff = x - center."""
        m, d = diff.shape
        sq = np.einsum("md,md->m", diff, diff)
        u = sq / self.r_eps ** 2
        psi = np.zeros(m)
        Dpsi = np.zeros((m, d))
        D2psi = np.zeros((m, d, d))
        inside = u < 1.0
        if not np.any(inside):
            return psi, Dpsi, D2psi
        ui = u[inside]
        w = 1.0 / (ui - 1.0)
        p = np.exp(w)
        du = 2.0 * diff[inside] / self.r_eps ** 2           # (mi, d)
        dw = -(w ** 2)
        d2w_uu = 2.0 * w ** 3
        psi[inside] = p
        Dpsi[inside] = p[:, None] * dw[:, None] * du
        outer = du[:, :, None] * du[:, None, :]
        eye = (2.0 / self.r_eps ** 2) * np.eye(d)
        D2psi[inside] = p[:, None, None] * (
            (dw ** 2 + d2w_uu)[:, None, None] * outer + dw[:, None, None] * eye[None]
        )
        return psi, Dpsi, D2psi

    # -- active-center lookup ----------------------------------------------------
    def _candidate_indices(self, x):
        reach = int(np.ceil(self.r_eps / self.epsilon + 0.5))
        ranges = []
        for a in range(self.dim):
            j = int(np.floor((x[a] - self.base) / self.epsilon))
            lo = max(j - reach, 0)
            hi = min(j + reach, self.cells_per_dim - 1)
            if lo > hi:
                return None
            ranges.append(range(lo, hi + 1))
        return np.array(list(itertools.product(*ranges)), dtype=int)

    def active_centers(self, x):
        """(multi-indices, centers, diffs) of bumps whose support contains x."""
        cand = self._candidate_indices(x)
        if cand is None:
            return None
        centers = self.center_axis[cand]
        diff = x[None, :] - centers
        sq = np.einsum("md,md->m", diff, diff)
        keep = sq < self.r_eps ** 2
        return cand[keep], centers[keep], diff[keep]

    # -- partition queries (tests and acceptance) ---------------------------------
    def phi_at(self, x, with_derivs=False):
        """Interior phi values (and derivatives) at one point x in R^(n+1).

        Returns (ordinals, phi) or (ordinals, phi, Dphi, D2phi).
        """
        x = np.asarray(x, float)
        act = self.active_centers(x)
        if act is None or len(act[0]) == 0:
            raise ConfigurationError("point outside the padded cover")
        idx, centers, diff = act
        ords = self.interior_id[tuple(idx.T)]
        interior = ords >= 0
        if not with_derivs:
            psi = self._psi(np.einsum("md,md->m", diff, diff))
            S = psi.sum()
            return ords[interior], psi[interior] / S
        psi, Dpsi, D2psi = self._psi_derivs(diff)
        S = psi.sum()
        DS = Dpsi.sum(axis=0)
        D2S = D2psi.sum(axis=0)
        pi, Dpi, D2pi = psi[interior], Dpsi[interior], D2psi[interior]
        phi = pi / S
        Dphi = Dpi / S - pi[:, None] * DS[None, :] / S ** 2
        cross = Dpi[:, :, None] * DS[None, None, :]
        D2phi = (D2pi / S
                 - (cross + np.swapaxes(cross, 1, 2)) / S ** 2
                 - pi[:, None, None] * D2S[None] / S ** 2
                 + 2.0 * pi[:, None, None] * np.einsum("a,b->ab", DS, DS)[None] / S ** 3)
        return ords[interior], phi, Dphi, D2phi

    def lattice_sums(self, axes):
        """(sum_all_psi, sum_interior_psi, interior_overlap_count) on a lattice.

        axes is a sequence of n+1 1-d coordinate arrays; output arrays have
        shape (len(axes[0]), ..., len(axes[n])). Loops over centers, which is
        fast because each bump touches only a small coordinate box.
        """
        axes = [np.asarray(a, float) for a in axes]
        shape = tuple(len(a) for a in axes)
        S_all = np.zeros(shape)
        S_int = np.zeros(shape)
        count = np.zeros(shape, dtype=int)
        for flat in range(self.cells_per_dim ** self.dim):
            idx = np.unravel_index(flat, (self.cells_per_dim,) * self.dim)
            center = self.center_axis[np.array(idx)]
            sels, sqs = [], []
            empty = False
            for a in range(self.dim):
                da = axes[a] - center[a]
                sel = np.nonzero(np.abs(da) < self.r_eps)[0]
                if sel.size == 0:
                    empty = True
                    break
                sels.append(sel)
                sqs.append(da[sel] ** 2)
            if empty:
                continue
            sq = sqs[0]
            for a in range(1, self.dim):
                sq = sq[..., None] + sqs[a]
            psi = self._psi(sq)
            region = np.ix_(*sels)
            S_all[region] += psi
            if self.interior_id[idx] >= 0:
                S_int[region] += psi
                count[region] += psi > 0.0
        return S_all, S_int, count

    def record_bounds(self, n_lattice=9, n_probes=400, seed=0):
        """Measure the overlap bound and derivative bound on sample sets."""
        axes = [np.linspace(-self.halfwidth, self.halfwidth, n_lattice)] * self.dim
        _, _, count = self.lattice_sums(axes)
        self.overlap_bound = int(count.max())
        rng = np.random.default_rng(seed)
        probes = rng.uniform(-self.halfwidth, self.halfwidth, size=(n_probes, self.dim))
        sup1 = sup2 = 0.0
        for x in probes:
            _, _, Dphi, D2phi = self.phi_at(x, with_derivs=True)
            if len(Dphi):
                sup1 = max(sup1, float(np.max(np.abs(Dphi))))
                sup2 = max(sup2, float(np.max(np.abs(D2phi))))
        self.derivative_bound = sup1 * self.epsilon
        self.second_derivative_bound = sup2 * self.epsilon ** 2
        return self.overlap_bound, self.derivative_bound

    # -- model contract --------------------------------------------------------
    def eval_all(self, theta, t, y) -> ModelEval:
        theta = self.check_theta(theta)
        y = np.asarray(y, float).reshape(self.n)
        x = np.concatenate([[float(t)], y])
        xT = x.copy()
        xT[0] = self.T
        ords, phi, Dphi, D2phi = self.phi_at(x, with_derivs=True)

        d = self.dim
        value = float(self.head_value(y[None])[0])
        grad_x = np.zeros(d)
        hess_yy = self.alpha * self.Q2tQ2.copy()
        gtheta = np.zeros(self.n_params)
        gytheta = np.zeros((self.n, self.n_params))
        dt_vec = x - xT                                   # only t-component nonzero
        iu0, iu1 = self._iu
        y_comp = np.arange(1, d)[:, None]
        nA = len(iu0)

        for o, ph, Dph, D2ph in zip(ords, phi, Dphi, D2phi):
            A, b, c = self.unpack_center(theta, int(o))
            center = self.interior_centers[int(o)]
            dx = x - center
            dxT = xT - center
            P = float(dx @ A @ dx + b @ dx + c)
            PT = float(dxT @ A @ dxT + b @ dxT + c)
            dP = 2.0 * (A @ dx) + b
            dPT = 2.0 * (A @ dxT) + b
            dPT[0] = 0.0                                  # x_T does not move with t
            delta = P - PT
            ddelta = dP - dPT
            value += ph * delta
            grad_x += Dph * delta + ph * ddelta
            # second P-derivatives of the two evaluations cancel in the yy block
            hess_yy += (D2ph[1:, 1:] * delta
                        + np.outer(Dph[1:], ddelta[1:])
                        + np.outer(ddelta[1:], Dph[1:]))
            sl = int(o) * self.block
            qa = self._pack_scale * (dx[iu0] * dx[iu1] - dxT[iu0] * dxT[iu1])
            gtheta[sl: sl + nA] = ph * qa
            gtheta[sl + nA: sl + nA + d] = ph * dt_vec
            dqa_dy = self._pack_scale[None, :] * (
                (iu0 == y_comp) * dx[iu1][None, :]
                + dx[iu0][None, :] * (iu1 == y_comp)
                - (iu0 == y_comp) * dxT[iu1][None, :]
                - dxT[iu0][None, :] * (iu1 == y_comp)
            )
            gytheta[:, sl: sl + nA] = np.outer(Dph[1:], qa) + ph * dqa_dy
            gytheta[:, sl + nA: sl + nA + d] = np.outer(Dph[1:], dt_vec)

        grad_y = self.head_grad(y[None])[0] + grad_x[1:]
        return ModelEval(value, grad_y, hess_yy, gtheta, gytheta)

    def metadata(self) -> dict:
        return {"epsilon": self.epsilon, "n": self.n, "halfwidth": self.halfwidth,
                "T": self.T, "alpha": self.alpha, "pad": self.pad,
                "n_interior": self.n_interior}


def build_partition(epsilon, n, cover_halfwidth, T, alpha=1.0, Q2=None, y_dT=None,
                    record_bounds=True) -> PartitionPolyModel:
    """Partition skeleton with centers, index sets and measured bounds."""
    model = PartitionPolyModel(epsilon, n, cover_halfwidth, T, alpha=alpha,
                               Q2=Q2, y_dT=y_dT)
    if record_bounds:
        model.record_bounds()
    return model


def taylor_init(partition: PartitionPolyModel, value_fn, grad_fn, hess_fn) -> np.ndarray:
    """Per-center second-order Taylor data of a reference value function.

    The callbacks take (t, y) and return the value, full (t, y)-gradient
    (length n+1) and full (t, y)-Hessian ((n+1) x (n+1)); the quadratic
    coefficient is half the Hessian so each local polynomial is the exact
    Taylor expansion.
    """
    theta = np.zeros(partition.n_params)
    for o in range(partition.n_interior):
        center = partition.interior_centers[o]
        t, y = center[0], center[1:]
        A = 0.5 * np.asarray(hess_fn(t, y), float)
        b = np.asarray(grad_fn(t, y), float)
        c = float(value_fn(t, y))
        theta[o * partition.block:(o + 1) * partition.block] = \
            partition.pack_center(0.5 * (A + A.T), b, c)
    return theta
