"""Flow map, its gradient and cofactor inverse, and field composition.

The flow map is carried as a displacement field: X(t, y) = y + disp(t, y).
Its gradient uses the Jacobian layout grad_x[..., a, b] = d X_a / d y_b, so
the chain-rule factor "d_i Y_k" of the transformed operators is
``grad_y[..., k, i]``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import InvertibilityLost
from .fields import bilinear_sample
from .operators import grad_h

log = logging.getLogger(__name__)

DET_FLOOR_DEFAULT = 0.25
INVERTIBILITY_BOUND = 0.5


def matrix_inf_norm(t):
    """Pointwise max row sum of a (..., 2, 2) tensor field."""
    return np.abs(t).sum(axis=-1).max(axis=-1)


class FlowMap:
    """Lagrangian map at a fixed time: displacement plus derived Jacobians."""

    def __init__(self, grid, disp=None, t=0.0):
        self.grid = grid
        if disp is None:
            disp = np.zeros((grid.nx, grid.ny, 2))
        self.disp = np.asarray(disp, dtype=float)
        if self.disp.shape != (grid.nx, grid.ny, 2):
            raise ValueError(f"displacement shape {self.disp.shape}")
        self.t = float(t)
        self._grad_x = None

    @classmethod
    def identity(cls, grid):
        return cls(grid)

    @property
    def grad_x(self):
        if self._grad_x is None:
            g = np.empty((self.grid.nx, self.grid.ny, 2, 2))
            g[..., 0, :] = grad_h(self.disp[..., 0], self.grid)
            g[..., 1, :] = grad_h(self.disp[..., 1], self.grid)
            g[..., 0, 0] += 1.0
            g[..., 1, 1] += 1.0
            self._grad_x = g
        return self._grad_x

    def grad_y(self, det_floor=DET_FLOOR_DEFAULT):
        return inverse_gradient(self.grad_x, det_floor=det_floor, time=self.t)

    def positions(self):
        """Forward-mapped node positions X(t, y)."""
        return self.grid.positions() + self.disp


def advance_flow_map(fmap, v_t, v_tdt, dt):
    """One trapezoidal update of the displacement over [t, t+dt].

    The gradient is recovered from the updated displacement with the same
    discrete gradient stencils; by linearity this equals applying the
    trapezoidal rule to the discrete gradients of the velocity.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    disp = fmap.disp + 0.5 * dt * (np.asarray(v_t) + np.asarray(v_tdt))
    return FlowMap(fmap.grid, disp, fmap.t + dt)


def inverse_gradient(grad_x, det_floor=DET_FLOOR_DEFAULT, time=None):
    """Exact per-node 2x2 cofactor inverse of the flow-map gradient."""
    g = np.asarray(grad_x)
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    min_det = det.min()
    if min_det < det_floor:
        node = np.unravel_index(int(np.argmin(det)), det.shape)
        raise InvertibilityLost(
            f"det grad X = {min_det:.4g} < floor {det_floor:.3g} at node {node}"
            + (f", t = {time:.6g}" if time is not None else ""),
            node=node,
            time=time,
        )
    inv = np.empty_like(g)
    inv[..., 0, 0] = g[..., 1, 1] / det
    inv[..., 0, 1] = -g[..., 0, 1] / det
    inv[..., 1, 0] = -g[..., 1, 0] / det
    inv[..., 1, 1] = g[..., 0, 0] / det
    return inv


@dataclass
class HealthReport:
    """Flow-map safety metrics at one time."""

    t: float
    sup_dev: float        # sup-node max-row-sum of grad X - Id
    min_det: float
    sup_dev_inv: float    # sup-node max-row-sum of Id - grad Y
    flag: bool            # sup_dev <= 1/2, the invertibility criterion

    def csv_row(self):
        return [self.t, self.sup_dev, self.min_det, self.sup_dev_inv]


def invertibility_check(fmap):
    """Pure report of the 1/2-criterion; the solver decides what to do."""
    g = fmap.grad_x
    dev = g.copy()
    dev[..., 0, 0] -= 1.0
    dev[..., 1, 1] -= 1.0
    sup_dev = float(matrix_inf_norm(dev).max())
    det = g[..., 0, 0] * g[..., 1, 1] - g[..., 0, 1] * g[..., 1, 0]
    min_det = float(det.min())
    if min_det > 0:
        gy = np.empty_like(g)
        gy[..., 0, 0] = g[..., 1, 1] / det
        gy[..., 0, 1] = -g[..., 0, 1] / det
        gy[..., 1, 0] = -g[..., 1, 0] / det
        gy[..., 1, 1] = g[..., 0, 0] / det
        gy[..., 0, 0] -= 1.0
        gy[..., 1, 1] -= 1.0
        sup_dev_inv = float(matrix_inf_norm(-gy).max())
    else:
        sup_dev_inv = np.inf
    return HealthReport(fmap.t, sup_dev, min_det, sup_dev_inv, sup_dev <= INVERTIBILITY_BOUND)


def inverse_positions(fmap, pts=None, newton_iters=3, det_floor=DET_FLOOR_DEFAULT):
    """Positions Y(t, x) solving X(Y) = x, by Newton refinement.

    Initial guess x - disp(x); up to ``newton_iters`` Newton steps with
    bilinearly interpolated displacement and Jacobian, stopping early at
    residual 1e-10 * min(dx, dy).
    """
    grid = fmap.grid
    if pts is None:
        pts = grid.positions()
    pts = np.asarray(pts, dtype=float)
    report = invertibility_check(fmap)
    if not report.flag or report.min_det < det_floor:
        raise InvertibilityLost(
            f"inverse positions requested on unhealthy map: sup|grad X - Id| = "
            f"{report.sup_dev:.4g}, min det = {report.min_det:.4g}",
            time=fmap.t,
        )
    tol = 1e-10 * min(grid.dx, grid.dy)
    y = pts - bilinear_sample(fmap.disp, grid, pts)
    grad_disp = fmap.grad_x.copy()
    grad_disp[..., 0, 0] -= 1.0
    grad_disp[..., 1, 1] -= 1.0
    for _ in range(newton_iters):
        res = y + bilinear_sample(fmap.disp, grid, y) - pts
        if np.abs(res).max() <= tol:
            break
        jac = bilinear_sample(grad_disp, grid, y)
        j11 = jac[..., 0, 0] + 1.0
        j12 = jac[..., 0, 1]
        j21 = jac[..., 1, 0]
        j22 = jac[..., 1, 1] + 1.0
        det = j11 * j22 - j12 * j21
        y = y - np.stack(
            [
                (j22 * res[..., 0] - j12 * res[..., 1]) / det,
                (-j21 * res[..., 0] + j11 * res[..., 1]) / det,
            ],
            axis=-1,
        )
    return y


def compose_with_map(field, fmap, direction, det_floor=DET_FLOOR_DEFAULT):
    """Compose a nodal field with the flow map.

    direction "forward": result(y) = field(X(t, y)) -- Eulerian data seen in
    Lagrangian coordinates.  direction "inverse": result(x) = field(Y(t, x))
    -- pushforward of Lagrangian fields; requires a healthy map.
    """
    if direction == "forward":
        return bilinear_sample(field, fmap.grid, fmap.positions())
    if direction == "inverse":
        return bilinear_sample(field, fmap.grid, inverse_positions(fmap, det_floor=det_floor))
    raise ValueError(f"direction must be 'forward' or 'inverse', got {direction!r}")
