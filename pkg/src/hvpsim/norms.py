"""Discrete anisotropic norms for fields and trajectories.

The ground norm treats velocity in L^q and thickness/concentration in
W^{1,q}; the regularity norm adds second differences of the velocity.  The
trace norm is a documented proxy (W^{1,q} in every component) for the true
interpolation-space norm, whose Besov exponent has no discrete counterpart
here.
"""

from __future__ import annotations

import numpy as np

from .operators import grad_h, hess_h


def trapezoid_weights(n):
    w = np.ones(n)
    w[0] = w[-1] = 0.5
    return w


def bochner_norm(values, dt, p):
    """(sum_n w_n dt |x_n|^p)^(1/p) with trapezoidal weights over the time grid."""
    values = np.asarray(values, dtype=float)
    w = trapezoid_weights(len(values))
    return float((dt * np.sum(w * values**p)) ** (1.0 / p))


class NormSuite:
    """All discrete norms over one grid, with fixed exponents."""

    def __init__(self, grid, p=8, q=8):
        if q <= 2:
            raise ValueError(f"q must lie in (2, oo), got {q}")
        if 1.0 / p + 1.0 / q >= 0.5:
            raise ValueError(f"need 1/p + 1/q < 1/2, got {1.0/p + 1.0/q:.4g}")
        self.grid = grid
        self.p = p
        self.q = q
        wx = np.full(grid.nx, grid.dx)
        wx[0] = wx[-1] = grid.dx / 2
        wy = np.full(grid.ny, grid.dy)
        wy[0] = wy[-1] = grid.dy / 2
        self.weights = np.outer(wx, wy)

    # -- scalar-field building blocks ------------------------------------

    def lq_pow(self, f):
        """Integral of |f|^q (trapezoidal weights); accepts trailing axes."""
        f = np.asarray(f, dtype=float)
        w = self.weights.reshape(self.weights.shape + (1,) * (f.ndim - 2))
        return float(np.sum(w * np.abs(f) ** self.q))

    def lq(self, f):
        return self.lq_pow(f) ** (1.0 / self.q)

    def w1q_pow(self, f):
        return self.lq_pow(f) + self.lq_pow(grad_h(f, self.grid))

    def w1q(self, f):
        return self.w1q_pow(f) ** (1.0 / self.q)

    def w2q_pow(self, f):
        return self.w1q_pow(f) + self.lq_pow(hess_h(f, self.grid))

    def w2q(self, f):
        return self.w2q_pow(f) ** (1.0 / self.q)

    # -- state norms ------------------------------------------------------

    def x0(self, u):
        """Ground norm: L^q velocity, W^{1,q} thickness and concentration."""
        return (self.lq_pow(u.v) + self.w1q_pow(u.h) + self.w1q_pow(u.a)) ** (1.0 / self.q)

    def x1(self, u):
        """Regularity norm: W^{2,q} velocity, W^{1,q} thickness/concentration."""
        return (
            self.w2q_pow(u.v[..., 0])
            + self.w2q_pow(u.v[..., 1])
            + self.w1q_pow(u.h)
            + self.w1q_pow(u.a)
        ) ** (1.0 / self.q)

    def xgamma(self, u):
        """Trace-norm proxy: W^{1,q} in every component."""
        return (
            self.w1q_pow(u.v[..., 0])
            + self.w1q_pow(u.v[..., 1])
            + self.w1q_pow(u.h)
            + self.w1q_pow(u.a)
        ) ** (1.0 / self.q)

    # -- trajectory norms ---------------------------------------------------

    def e0(self, states, dt):
        """L^p-in-time of the ground norm, trapezoidal quadrature."""
        return bochner_norm([self.x0(u) for u in states], dt, self.p)

    def e1(self, states, dt):
        """Discrete solution-space norm.

        (sum_n dt (|(u_{n+1}-u_n)/dt|_X0^p + |u_n|_X1^p))^(1/p) over the
        steps n = 0 .. N-1.
        """
        total = 0.0
        for n in range(len(states) - 1):
            du = (states[n + 1] - states[n]) * (1.0 / dt)
            total += dt * (self.x0(du) ** self.p + self.x1(states[n]) ** self.p)
        return float(total ** (1.0 / self.p))
