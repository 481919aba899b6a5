"""Semi-implicit Eulerian solver of the untransformed system.

Deliberately independent from the frozen-coefficient machinery: advection by
first-order upwind, stress divergence implicit with viscosities lagged at the
previous state (the classical treatment for this rheology), remaining forces
explicit.  Serves as the cross-validation oracle for the flow-map pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CFLViolation
from .fields import StateField, enforce_dirichlet, validate_state
from .nonlinear import atm_drag, ocean_drag, perp
from .operators import GridStencils, grad_h, interior_values, strain_of
from .rheology import delta_reg, ice_strength
from .thermo import source_a, source_h


@dataclass
class EulerianOptions:
    """Term toggles; the full model runs with everything on."""

    advection: bool = True
    stress: bool = True
    coriolis: bool = True
    drag: bool = True
    surface_tilt: bool = True
    sources: bool = True
    freeze_velocity: bool = False


@dataclass
class StepDiagnostics:
    cfl: float
    impulse_stress: np.ndarray
    impulse_coriolis: np.ndarray
    impulse_drag: np.ndarray
    impulse_tilt: np.ndarray
    momentum_change: np.ndarray


@dataclass
class EulerianTrajectory:
    grid: object
    times: np.ndarray
    states: list
    cfl_history: list = field(default_factory=list)
    margins: list = field(default_factory=list)

    def final_state(self):
        return self.states[-1]


class _StressWorkspace:
    """Grid-constant sparse factors of the lagged-viscosity stress operator."""

    def __init__(self, grid):
        st = GridStencils.get(grid)
        dx_ai = st.restrict(st.dx_full, rows="all", cols="interior")
        dy_ai = st.restrict(st.dy_full, rows="all", cols="interior")
        na = grid.n_nodes
        z = sp.csr_matrix((na, grid.n_interior))
        # strains (e11, e12, e22 at all nodes) from interior velocity
        self.E = sp.bmat(
            [[dx_ai, z], [0.5 * dy_ai, 0.5 * dx_ai], [z, dy_ai]], format="csr"
        )
        dx_ia = st.restrict(st.dx_full, rows="interior", cols="all")
        dy_ia = st.restrict(st.dy_full, rows="interior", cols="all")
        zi = sp.csr_matrix((grid.n_interior, na))
        # divergence of the symmetric flux (s11, s12, s22) at interior nodes
        self.D = sp.bmat([[dx_ia, dy_ia, zi], [zi, dx_ia, dy_ia]], format="csr")
        self.grid = grid

    def operator(self, zeta, eta, rho_h):
        """(1 / rho h) div (2 eta e(v) + (zeta - eta) tr e(v) Id) on interior v."""
        z = zeta.ravel()
        e = eta.ravel()
        na = self.grid.n_nodes
        # s11 = (z+e) e11 + (z-e) e22 ; s12 = 2 e e12 ; s22 = (z-e) e11 + (z+e) e22
        W = sp.bmat(
            [
                [sp.diags(z + e), None, sp.diags(z - e)],
                [None, sp.diags(2 * e), None],
                [sp.diags(z - e), None, sp.diags(z + e)],
            ],
            format="csr",
        )
        inv_m = 1.0 / interior_values(rho_h, self.grid)
        scale = sp.diags(np.concatenate([inv_m, inv_m]))
        return (scale @ self.D @ W @ self.E).tocsr()


_workspaces = {}


def _workspace(grid):
    key = (grid.nx, grid.ny, round(grid.dx, 15), round(grid.dy, 15))
    if key not in _workspaces:
        _workspaces[key] = _StressWorkspace(grid)
    return _workspaces[key]


def _upwind_convective(v, f, grid):
    """(v . grad) f with first-order directional upwinding."""
    f = np.asarray(f, dtype=float)
    dxf_b = np.empty_like(f)
    dxf_f = np.empty_like(f)
    dxf_b[1:, :] = (f[1:, :] - f[:-1, :]) / grid.dx
    dxf_b[0, :] = (f[1, :] - f[0, :]) / grid.dx
    dxf_f[:-1, :] = (f[1:, :] - f[:-1, :]) / grid.dx
    dxf_f[-1, :] = (f[-1, :] - f[-2, :]) / grid.dx
    dyf_b = np.empty_like(f)
    dyf_f = np.empty_like(f)
    dyf_b[:, 1:] = (f[:, 1:] - f[:, :-1]) / grid.dy
    dyf_b[:, 0] = (f[:, 1] - f[:, 0]) / grid.dy
    dyf_f[:, :-1] = (f[:, 1:] - f[:, :-1]) / grid.dy
    dyf_f[:, -1] = (f[:, -1] - f[:, -2]) / grid.dy
    return v[..., 0] * np.where(v[..., 0] > 0, dxf_b, dxf_f) + v[..., 1] * np.where(
        v[..., 1] > 0, dyf_b, dyf_f
    )


def _upwind_flux_div(v, f, grid):
    """div(v f) by donor-cell fluxes on faces; zero-gradient outer faces."""
    f = np.asarray(f, dtype=float)
    out = np.zeros_like(f)
    uf = 0.5 * (v[:-1, :, 0] + v[1:, :, 0])
    flux_x = np.where(uf > 0, uf * f[:-1, :], uf * f[1:, :])
    out[1:-1, :] += (flux_x[1:, :] - flux_x[:-1, :]) / grid.dx
    out[0, :] += (flux_x[0, :] - v[0, :, 0] * f[0, :]) / grid.dx
    out[-1, :] += (v[-1, :, 0] * f[-1, :] - flux_x[-1, :]) / grid.dx
    vf = 0.5 * (v[:, :-1, 1] + v[:, 1:, 1])
    flux_y = np.where(vf > 0, vf * f[:, :-1], vf * f[:, 1:])
    out[:, 1:-1] += (flux_y[:, 1:] - flux_y[:, :-1]) / grid.dy
    out[:, 0] += (flux_y[:, 0] - v[:, 0, 1] * f[:, 0]) / grid.dy
    out[:, -1] += (v[:, -1, 1] * f[:, -1] - flux_y[:, -1]) / grid.dy
    return out


def step_eulerian(u_n, params, grid, forcing, t, dt, options=None):
    """One operator-split step; returns the new state and diagnostics.

    Order: explicit upwind advection, implicit stress divergence with lagged
    viscosities (one sparse solve), explicit Coriolis/tilt/drag and
    thermodynamic sources.
    """
    if options is None:
        options = EulerianOptions()
    v = u_n.v
    cfl = float(dt * (np.abs(v[..., 0]) / grid.dx + np.abs(v[..., 1]) / grid.dy).max())
    if cfl > 0.5:
        raise CFLViolation(cfl, 0.5 * dt / cfl)

    cell = grid.dx * grid.dy
    rho_h = params.rho_ice * u_n.h
    inner = (slice(1, -1), slice(1, -1))

    def impulse(density):
        # momentum bookkeeping over the evolving (interior) rows only
        return cell * np.einsum("xy,xyc->c", rho_h[inner], density[inner])

    if options.advection:
        v_star = np.stack(
            [
                v[..., 0] - dt * _upwind_convective(v, v[..., 0], grid),
                v[..., 1] - dt * _upwind_convective(v, v[..., 1], grid),
            ],
            axis=-1,
        )
        if not options.freeze_velocity:
            v_star = enforce_dirichlet(v_star, grid)
        h_new = u_n.h - dt * _upwind_flux_div(v, u_n.h, grid)
        a_new = u_n.a - dt * _upwind_flux_div(v, u_n.a, grid)
    else:
        v_star = v.copy()
        h_new = u_n.h.copy()
        a_new = u_n.a.copy()

    if options.freeze_velocity:
        state = StateField(v.copy(), h_new, a_new)
        zero = np.zeros(2)
        return state, StepDiagnostics(cfl, zero, zero, zero, zero, zero)

    imp_stress = np.zeros(2)
    if options.stress:
        P = ice_strength(u_n.h, u_n.a, params)
        dd = delta_reg(strain_of(v, grid), params.delta, params.e)
        zeta = P / (2.0 * dd)
        eta = zeta / params.e**2
        ws = _workspace(grid)
        L = ws.operator(zeta, eta, rho_h)
        ni = grid.n_interior
        lhs = (sp.identity(2 * ni, format="csr") - dt * L).tocsc()
        gP = grad_h(P, grid)
        rhs_field = v_star - dt * gP / (2.0 * rho_h)[..., None]
        b = np.concatenate(
            [interior_values(rhs_field[..., 0], grid), interior_values(rhs_field[..., 1], grid)]
        )
        sol = spla.splu(lhs).solve(b)
        v_ss = np.zeros_like(v_star)
        v_ss[1:-1, 1:-1, 0] = sol[:ni].reshape(grid.nx - 2, grid.ny - 2)
        v_ss[1:-1, 1:-1, 1] = sol[ni:].reshape(grid.nx - 2, grid.ny - 2)
        imp_stress = impulse(v_ss - v_star)
    else:
        v_ss = v_star

    accel = np.zeros_like(v_ss)
    imp_cor = np.zeros(2)
    imp_drag = np.zeros(2)
    imp_tilt = np.zeros(2)
    if options.coriolis:
        term = -params.c_cor * perp(v_ss)
        accel += term
        imp_cor = dt * impulse(term)
    if options.surface_tilt:
        term = -params.g * forcing.grad_h_surf(t)
        accel += term
        imp_tilt = dt * impulse(term)
    if options.drag:
        tau = atm_drag(forcing.v_atm(t), params) + ocean_drag(v_ss, forcing.v_ocn(t), params)
        accel += tau / rho_h[..., None]
        imp_drag = cell * dt * tau[inner].sum(axis=(0, 1))
    v_new = enforce_dirichlet(v_ss + dt * accel, grid)

    if options.sources and forcing.f_gr is not None:
        h_new = h_new + dt * source_h(h_new, a_new, forcing.f_gr)
        a_new = a_new + dt * source_a(h_new, a_new, forcing.f_gr, params.kappa)

    dmom = impulse(v_new - v)
    state = StateField(v_new, h_new, a_new)
    return state, StepDiagnostics(cfl, imp_stress, imp_cor, imp_drag, imp_tilt, dmom)


def run_eulerian(u0, params, grid, forcing, T, dt, options=None, record_margins=True):
    """Time loop over the split step; records CFL and admissibility margins."""
    from .linear_solver import time_grid

    times = time_grid(T, dt)
    states = [u0.copy()]
    traj = EulerianTrajectory(grid, times, states)
    for n in range(len(times) - 1):
        state, diag = step_eulerian(states[-1], params, grid, forcing, times[n], dt, options)
        states.append(state)
        traj.cfl_history.append(diag.cfl)
        if record_margins:
            rep = validate_state(state, params)
            traj.margins.append((rep.margin_h, rep.margin_a))
    return traj
