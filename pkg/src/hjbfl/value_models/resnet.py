"""Residual-network value model with hand-coded derivatives.

The network maps x = (t, y) through L-1 residual layers
x_i = sigma(W_i1 x_{i-1} + b_i) + W_i2 x_{i-1} and a linear head W_L.
The model value is the quadratic terminal head plus the difference
net(t, y) - net(T, y), which pins the terminal condition for every theta.
All five derivative outputs come from one batched forward/backward sweep;
no autodiff library is involved.
"""

from __future__ import annotations

import numpy as np

from ..core_types import ConfigurationError
from .activation import ACTIVATIONS, SIN_PLUS_COS
from .base import ModelEval, ModelNodeCache, ValueModel


def resnet_param_count(arch) -> int:
    L = len(arch) - 1
    count = 0
    for i in range(1, L):
        count += 2 * arch[i] * arch[i - 1] + arch[i]
    return count + arch[L] * arch[L - 1]


class ResidualNetModel(ValueModel):
    """Two-weight residual net surrogate; arch = (n+1, ..., 1)."""

    family = "resnet"

    def __init__(self, arch, T: float, n: int, alpha: float, Q2, y_dT,
                 activation=SIN_PLUS_COS):
        super().__init__(n=n, alpha=alpha, Q2=Q2, y_dT=y_dT)
        arch = tuple(int(w) for w in arch)
        if len(arch) < 2:
            raise ConfigurationError("arch needs at least two entries")
        if arch[0] != n + 1:
            raise ConfigurationError(f"input width must be n+1={n + 1}, got {arch[0]}")
        if arch[-1] != 1:
            raise ConfigurationError("output width must be 1")
        if len(arch) - 1 > 4:
            raise ConfigurationError("architectures deeper than 4 layers are unsupported")
        self.arch = arch
        self.T = float(T)
        self.sigma = activation
        self._slices = self._build_layout()

    @classmethod
    def for_problem(cls, spec, hidden=(60,), activation=SIN_PLUS_COS):
        arch = (spec.n + 1, *hidden, 1)
        return cls(arch, T=spec.T, n=spec.n, alpha=spec.alpha, Q2=spec.Q2,
                   y_dT=spec.y_dT, activation=activation)

    # -- parameter layout ----------------------------------------------------
    def _build_layout(self):
        slices = {}
        pos = 0
        L = len(self.arch) - 1
        for i in range(1, L):
            no, ni = self.arch[i], self.arch[i - 1]
            for name, size in ((f"W{i}_1", no * ni), (f"W{i}_2", no * ni), (f"b{i}", no)):
                slices[name] = slice(pos, pos + size)
                pos += size
        slices[f"W{L}"] = slice(pos, pos + self.arch[L] * self.arch[L - 1])
        pos += self.arch[L] * self.arch[L - 1]
        self._n_params = pos
        return slices

    @property
    def n_params(self) -> int:
        return self._n_params

    def block_slices(self) -> dict:
        """Flat-vector slice of every weight block, in layout order."""
        return dict(self._slices)

    def unpack(self, theta):
        theta = self.check_theta(theta)
        L = len(self.arch) - 1
        W1, W2, b = [], [], []
        for i in range(1, L):
            no, ni = self.arch[i], self.arch[i - 1]
            W1.append(theta[self._slices[f"W{i}_1"]].reshape(no, ni))
            W2.append(theta[self._slices[f"W{i}_2"]].reshape(no, ni))
            b.append(theta[self._slices[f"b{i}"]])
        WL = theta[self._slices[f"W{L}"]].reshape(self.arch[L], self.arch[L - 1])
        return W1, W2, b, WL

    def default_theta(self, rng: np.random.Generator) -> np.ndarray:
        """W blocks uniform on [-s, s] with s = 1/sqrt(fan_in); biases zero."""
        theta = np.zeros(self.n_params)
        L = len(self.arch) - 1
        for i in range(1, L):
            s = 1.0 / np.sqrt(self.arch[i - 1])
            for blk in (f"W{i}_1", f"W{i}_2"):
                sl = self._slices[blk]
                theta[sl] = rng.uniform(-s, s, sl.stop - sl.start)
        s = 1.0 / np.sqrt(self.arch[L - 1])
        sl = self._slices[f"W{L}"]
        theta[sl] = rng.uniform(-s, s, sl.stop - sl.start)
        return theta

    # -- network sweeps --------------------------------------------------------
    def _net_x(self, params, X):
        """Value, x-gradient and x-Hessian of the raw network, batched.

        X is (B, d); returns val (B,), gx (B, d), Hx (B, d, d). The first
        layer is special-cased (Xp starts at the identity, Xpp at zero).
        """
        W1, W2, b, WL = params
        if len(W1) == 1:
            return self._net_x_shallow(params, X)
        B, d = X.shape
        x = X
        Xp = None
        Xpp = None
        for i, (W1i, W2i, bi) in enumerate(zip(W1, W2, b)):
            z = x @ W1i.T + bi
            s1 = self.sigma.deriv(z, 1)
            s2 = self.sigma.deriv(z, 2)
            if i == 0:
                Zp = np.broadcast_to(W1i, (B,) + W1i.shape)
                Xpp = s2[:, :, None, None] * (W1i[:, :, None] * W1i[:, None, :])[None]
                Xp = s1[:, :, None] * W1i + W2i[None]
            else:
                Zp = np.matmul(W1i[None], Xp)
                W1pp = np.tensordot(Xpp, W1i, axes=(1, 1)).transpose(0, 3, 1, 2)
                W2pp = np.tensordot(Xpp, W2i, axes=(1, 1)).transpose(0, 3, 1, 2)
                Xpp = (s2[:, :, None, None] * Zp[:, :, :, None] * Zp[:, :, None, :]
                       + s1[:, :, None, None] * W1pp + W2pp)
                Xp = s1[:, :, None] * Zp + np.matmul(W2i[None], Xp)
            x = self.sigma.deriv(z, 0) + x @ W2i.T
        val = (x @ WL.T)[:, 0]
        gx = np.tensordot(Xp, WL[0], axes=(1, 0))
        Hx = np.tensordot(Xpp, WL[0], axes=(1, 0))
        return val, gx, Hx

    def _net_x_shallow(self, params, X):
        """Single-hidden-layer lane of _net_x: head weights contracted early,
        so no (B, width, d, d) intermediate is built."""
        W1i, W2i, bi, wl = params[0][0], params[1][0], params[2][0], params[3][0]
        B, d = X.shape
        z = X @ W1i.T + bi
        s1 = self.sigma.deriv(z, 1)
        s2 = self.sigma.deriv(z, 2)
        val = (self.sigma.deriv(z, 0) + X @ W2i.T) @ wl
        gx = (s1 * wl) @ W1i + (wl @ W2i)[None, :]
        outer = (W1i[:, :, None] * W1i[:, None, :]).reshape(W1i.shape[0], d * d)
        Hx = ((s2 * wl) @ outer).reshape(B, d, d)
        return val, gx, Hx

    def _net_x_shallow_nohess(self, params, X):
        W1i, W2i, bi, wl = params[0][0], params[1][0], params[2][0], params[3][0]
        z = X @ W1i.T + bi
        s1 = self.sigma.deriv(z, 1)
        val = (self.sigma.deriv(z, 0) + X @ W2i.T) @ wl
        gx = (s1 * wl) @ W1i + (wl @ W2i)[None, :]
        return val, gx, None

    def _net_full(self, params, X):
        """As _net_x plus parameter gradient and mixed x/theta derivative."""
        W1, W2, b, WL = params
        B, d = X.shape
        xs = [X]
        zs, s1s, s2s, Zps = [], [], [], []
        Xp = np.broadcast_to(np.eye(d), (B, d, d)).copy()
        Xps = [Xp]
        Xpp = np.zeros((B, d, d, d))
        for W1i, W2i, bi in zip(W1, W2, b):
            x = xs[-1]
            z = x @ W1i.T + bi
            s1 = self.sigma.deriv(z, 1)
            s2 = self.sigma.deriv(z, 2)
            Zp = np.einsum("rs,bsd->brd", W1i, Xp)
            W1pp = np.einsum("rs,bsde->brde", W1i, Xpp)
            W2pp = np.einsum("rs,bsde->brde", W2i, Xpp)
            Xpp = (s2[:, :, None, None] * Zp[:, :, :, None] * Zp[:, :, None, :]
                   + s1[:, :, None, None] * W1pp + W2pp)
            Xp = s1[:, :, None] * Zp + np.einsum("rs,bsd->brd", W2i, Xp)
            xs.append(self.sigma.deriv(z, 0) + x @ W2i.T)
            zs.append(z)
            s1s.append(s1)
            s2s.append(s2)
            Zps.append(Zp)
            Xps.append(Xp)
        val = (xs[-1] @ WL.T)[:, 0]
        gx = np.einsum("os,bsd->bd", WL, Xps[-1])
        Hx = np.einsum("os,bsde->bde", WL, Xpp)

        # reverse sweep: a_i = d net / d x_i, G_i = d a_i / d x
        n_layers = len(zs)
        a = np.broadcast_to(WL[0], (B, WL.shape[1])).copy()
        G = np.zeros((B, d, WL.shape[1]))
        gtheta = np.empty((B, self.n_params))
        mixed = np.empty((B, d, self.n_params))
        L = len(self.arch) - 1
        sl = self._slices[f"W{L}"]
        gtheta[:, sl] = xs[-1]
        mixed[:, :, sl] = np.swapaxes(Xps[-1], 1, 2)
        for i in range(n_layers - 1, -1, -1):
            s1, s2, Zp, xin, Xpin = s1s[i], s2s[i], Zps[i], xs[i], Xps[i]
            as1 = a * s1
            as2zp = (a * s2)[:, :, None] * Zp          # (B, r, d)
            sl1 = self._slices[f"W{i + 1}_1"]
            sl2 = self._slices[f"W{i + 1}_2"]
            slb = self._slices[f"b{i + 1}"]
            gtheta[:, sl1] = (as1[:, :, None] * xin[:, None, :]).reshape(B, -1)
            gtheta[:, sl2] = (a[:, :, None] * xin[:, None, :]).reshape(B, -1)
            gtheta[:, slb] = as1
            XpT = np.swapaxes(Xpin, 1, 2)              # (B, d, s)
            m1 = (G * s1[:, None, :])[:, :, :, None] * xin[:, None, None, :] \
                + np.swapaxes(as2zp, 1, 2)[:, :, :, None] * xin[:, None, None, :] \
                + as1[:, None, :, None] * XpT[:, :, None, :]
            mixed[:, :, sl1] = m1.reshape(B, d, -1)
            m2 = G[:, :, :, None] * xin[:, None, None, :] \
                + a[:, None, :, None] * XpT[:, :, None, :]
            mixed[:, :, sl2] = m2.reshape(B, d, -1)
            mixed[:, :, slb] = G * s1[:, None, :] + np.swapaxes(as2zp, 1, 2)
            if i > 0:
                J = s1[:, :, None] * W1[i] + W2[i]     # (B, r, s)
                G = np.einsum("bdr,brs->bds", G, J) \
                    + np.einsum("brd,rs->bds", as2zp, W1[i])
                a = np.einsum("br,brs->bs", a, J)
        return val, gx, Hx, gtheta, mixed

    # -- model contract --------------------------------------------------------
    def _stack_inputs(self, ts, Y):
        ts = np.atleast_1d(np.asarray(ts, dtype=float))
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        Xt = np.concatenate([ts[:, None], Y], axis=1)
        XT = Xt.copy()
        XT[:, 0] = self.T
        return np.concatenate([Xt, XT], axis=0), Y

    def eval_nodes(self, theta, ts, Y) -> ModelNodeCache:
        params = self.unpack(theta)
        X, Y = self._stack_inputs(ts, Y)
        if not np.all(np.isfinite(X)):
            raise FloatingPointError("non-finite network input")
        B = X.shape[0] // 2
        val, gx, Hx, gth, mix = self._net_full(params, X)
        head_hess = self.alpha * self.Q2tQ2
        return ModelNodeCache(
            value=self.head_value(Y) + val[:B] - val[B:],
            grad_y=self.head_grad(Y) + gx[:B, 1:] - gx[B:, 1:],
            hess_yy=head_hess[None] + Hx[:B, 1:, 1:] - Hx[B:, 1:, 1:],
            grad_theta=gth[:B] - gth[B:],
            grad_y_theta=mix[:B, 1:, :] - mix[B:, 1:, :],
        )

    def eval_all(self, theta, t, y) -> ModelEval:
        c = self.eval_nodes(theta, [t], [y])
        return ModelEval(float(c.value[0]), c.grad_y[0], c.hess_yy[0],
                         c.grad_theta[0], c.grad_y_theta[0])

    def value(self, theta, t, y) -> float:
        params = self.unpack(theta)
        X, Y = self._stack_inputs([t], [y])
        x = X
        W1, W2, b, WL = params
        for W1i, W2i, bi in zip(W1, W2, b):
            x = self.sigma.deriv(x @ W1i.T + bi, 0) + x @ W2i.T
        val = (x @ WL.T)[:, 0]
        return float(self.head_value(Y)[0] + val[0] - val[1])

    def value_and_grad_y(self, theta, t, y):
        params = self.unpack(theta)
        X, Y = self._stack_inputs([t], [y])
        val, gx, _ = self._net_x_nohess(params, X)
        v = float(self.head_value(Y)[0] + val[0] - val[1])
        vy = self.head_grad(Y)[0] + gx[0, 1:] - gx[1, 1:]
        return v, vy

    def grad_y_and_hess(self, theta, t, y):
        params = self.unpack(theta)
        X, Y = self._stack_inputs([t], [y])
        _, gx, Hx = self._net_x(params, X)
        vy = self.head_grad(Y)[0] + gx[0, 1:] - gx[1, 1:]
        vyy = self.alpha * self.Q2tQ2 + Hx[0, 1:, 1:] - Hx[1, 1:, 1:]
        return vy, vyy

    def grad_y_batch(self, theta, ts, Y):
        params = self.unpack(theta)
        X, Y = self._stack_inputs(ts, Y)
        B = X.shape[0] // 2
        _, gx, _ = self._net_x_nohess(params, X)
        return self.head_grad(Y) + gx[:B, 1:] - gx[B:, 1:]

    def value_grad_y_batch(self, theta, ts, Y):
        params = self.unpack(theta)
        X, Y = self._stack_inputs(ts, Y)
        B = X.shape[0] // 2
        val, gx, _ = self._net_x_nohess(params, X)
        V = self.head_value(Y) + val[:B] - val[B:]
        vy = self.head_grad(Y) + gx[:B, 1:] - gx[B:, 1:]
        return V, vy

    def grad_hess_batch(self, theta, ts, Y):
        params = self.unpack(theta)
        X, Y = self._stack_inputs(ts, Y)
        B = X.shape[0] // 2
        _, gx, Hx = self._net_x(params, X)
        vy = self.head_grad(Y) + gx[:B, 1:] - gx[B:, 1:]
        vyy = (self.alpha * self.Q2tQ2)[None] + Hx[:B, 1:, 1:] - Hx[B:, 1:, 1:]
        return vy, vyy

    def _net_x_nohess(self, params, X):
        W1, W2, b, WL = params
        if len(W1) == 1:
            return self._net_x_shallow_nohess(params, X)
        B, d = X.shape
        x = X
        Xp = None
        for i, (W1i, W2i, bi) in enumerate(zip(W1, W2, b)):
            z = x @ W1i.T + bi
            s1 = self.sigma.deriv(z, 1)
            if i == 0:
                Xp = s1[:, :, None] * W1i + W2i[None]
            else:
                Xp = s1[:, :, None] * np.matmul(W1i[None], Xp) + np.matmul(W2i[None], Xp)
            x = self.sigma.deriv(z, 0) + x @ W2i.T
        val = (x @ WL.T)[:, 0]
        gx = np.tensordot(Xp, WL[0], axes=(1, 0))
        return val, gx, None

    def eval_nodes_x(self, theta, ts, Y):
        params = self.unpack(theta)
        X, Y = self._stack_inputs(ts, Y)
        B = X.shape[0] // 2
        val, gx, Hx = self._net_x(params, X)
        V = self.head_value(Y) + val[:B] - val[B:]
        vy = self.head_grad(Y) + gx[:B, 1:] - gx[B:, 1:]
        vyy = (self.alpha * self.Q2tQ2)[None] + Hx[:B, 1:, 1:] - Hx[B:, 1:, 1:]
        return V, vy, vyy

    def make_xeval(self, theta):
        params = self.unpack(theta)
        head_hess = self.alpha * self.Q2tQ2

        def xeval(ts, Ys, need_hess):
            X, Y = self._stack_inputs(ts, Ys)
            B = X.shape[0] // 2
            if need_hess:
                _, gx, Hx = self._net_x(params, X)
                vyy = head_hess[None] + Hx[:B, 1:, 1:] - Hx[B:, 1:, 1:]
            else:
                _, gx, _ = self._net_x_nohess(params, X)
                vyy = None
            vy = self.head_grad(Y) + gx[:B, 1:] - gx[B:, 1:]
            return vy, vyy

        return xeval

    def theta_vjp(self, theta, ts, Y, w_value, w_grady) -> np.ndarray:
        """Reverse sweep through the primal and tangent (y-derivative) passes."""
        params = self.unpack(theta)
        W1, W2, b, WL = params
        X, _ = self._stack_inputs(ts, Y)
        B2, d = X.shape
        B = B2 // 2
        sign = np.concatenate([np.ones(B), -np.ones(B)])
        a = np.concatenate([np.asarray(w_value, float)] * 2) * sign
        c = np.zeros((B2, d))
        wg = np.asarray(w_grady, float)
        c[:B, 1:] = wg
        c[B:, 1:] = -wg

        # forward: primal xs and tangent ts (directional x-derivative seeded by c)
        xs = [X]
        tg = [c]
        s1s, s2s, tW1s = [], [], []
        for W1i, W2i, bi in zip(W1, W2, b):
            z = xs[-1] @ W1i.T + bi
            s1 = self.sigma.deriv(z, 1)
            s2 = self.sigma.deriv(z, 2)
            tW1 = tg[-1] @ W1i.T
            xs.append(self.sigma.deriv(z, 0) + xs[-1] @ W2i.T)
            tg.append(s1 * tW1 + tg[-1] @ W2i.T)
            s1s.append(s1)
            s2s.append(s2)
            tW1s.append(tW1)

        grad = np.empty(self.n_params)
        L = len(self.arch) - 1
        grad[self._slices[f"W{L}"]] = a @ xs[-1] + tg[-1].sum(axis=0)
        xbar = a[:, None] * WL[0][None, :]
        tbar = np.broadcast_to(WL[0], (B2, WL.shape[1])).copy()
        for i in range(L - 1, 0, -1):
            s1, s2, tW1 = s1s[i - 1], s2s[i - 1], tW1s[i - 1]
            xin, tin = xs[i - 1], tg[i - 1]
            zbar = xbar * s1 + tbar * s2 * tW1
            tbar_s1 = tbar * s1
            grad[self._slices[f"b{i}"]] = zbar.sum(axis=0)
            grad[self._slices[f"W{i}_1"]] = (zbar.T @ xin + tbar_s1.T @ tin).ravel()
            grad[self._slices[f"W{i}_2"]] = (xbar.T @ xin + tbar.T @ tin).ravel()
            if i > 1:
                xbar = zbar @ W1[i - 1] + xbar @ W2[i - 1]
                tbar = tbar_s1 @ W1[i - 1] + tbar @ W2[i - 1]
        return grad

    def metadata(self) -> dict:
        return {"arch": list(self.arch), "activation": self.sigma.name,
                "T": self.T, "alpha": self.alpha}
