"""Transformed operators in flow-map coordinates and the fixed-point solver.

The solution is built as u_tilde = u_hat + u_ref, where u_ref is the
frozen-coefficient reference solution through the initial data and u_hat
solves the zero-initial-value linear problem with right-hand sides evaluated
at the previous iterate.  The linear operator stays frozen at the initial
state for the whole iteration; all nonlinearity enters through the
right-hand sides.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import BlowupSignal, InvertibilityLost, NoConvergence
from .fields import StateField, validate_state
from .lagrangian import (
    DET_FLOOR_DEFAULT,
    FlowMap,
    advance_flow_map,
    compose_with_map,
    invertibility_check,
)
from .norms import NormSuite
from .operators import (
    assemble_operator_matrix,
    div_h,
    grad_h,
    pack_state,
    select_omega,
    unpack_state,
)
from .rheology import (
    Strain,
    coeff_tensor,
    ice_strength_da,
    ice_strength_dh,
    s_apply,
)
from .linear_solver import solve_linear_ivp, solve_reference, time_grid
from .thermo import source_a, source_h

log = logging.getLogger(__name__)


def _velocity_gradient(v, grid):
    """dv[..., j, k] = d v_j / d y_k."""
    v = np.asarray(v)
    out = np.empty(v.shape[:-1] + (2, 2))
    out[..., 0, :] = grad_h(v[..., 0], grid)
    out[..., 1, :] = grad_h(v[..., 1], grid)
    return out


def transformed_strain(v_tilde, grad_y, grid):
    """Symmetric chain-rule gradient: 2 e_ij = sum_k (d_i Y_k) d_k v_j + (d_j Y_k) d_k v_i.

    ``grad_y[..., k, i]`` holds d_i Y_k; with the identity map this reduces
    to the plain strain.
    """
    dv = _velocity_gradient(v_tilde, grid)
    gy = np.asarray(grad_y)
    # full[..., i, j] = sum_k (d_i Y_k) (d_k v_j)
    full = np.einsum("...ki,...jk->...ij", gy, dv)
    return Strain(full[..., 0, 0], 0.5 * (full[..., 0, 1] + full[..., 1, 0]), full[..., 1, 1])


def strain_gradient(eps, grid):
    """deps[..., j, l, m] = d_m eps_jl by direct differencing of the strain field."""
    out = np.empty(eps.e11.shape + (2, 2, 2))
    g11 = grad_h(eps.e11, grid)
    g12 = grad_h(eps.e12, grid)
    g22 = grad_h(eps.e22, grid)
    out[..., 0, 0, :] = g11
    out[..., 0, 1, :] = g12
    out[..., 1, 0, :] = g12
    out[..., 1, 1, :] = g22
    return out


def strain_gradient_expanded(v_tilde, grad_y, grid):
    """Product-rule expansion of d_m eps_jl for the transformed strain.

    d_m eps_jl = 1/2 sum_n ( (d_m d_j Y_n) d_n v_l + (d_j Y_n) d_m d_n v_l
                           + (d_m d_l Y_n) d_n v_j + (d_l Y_n) d_m d_n v_j ).

    Used as an independent oracle against direct differencing of the strain.
    """
    v = np.asarray(v_tilde)
    gy = np.asarray(grad_y)
    dv = _velocity_gradient(v, grid)
    # second derivatives of velocity: hv[..., j, n, m] = d_m d_n v_j
    hv = np.empty(v.shape[:-1] + (2, 2, 2))
    for j in range(2):
        hv[..., j, :, :] = np.stack(
            [grad_h(dv[..., j, 0], grid), grad_h(dv[..., j, 1], grid)], axis=-2
        )
    # ggy[..., n, j, m] = d_m d_j Y_n
    ggy = np.empty(v.shape[:-1] + (2, 2, 2))
    for n in range(2):
        for j in range(2):
            ggy[..., n, j, :] = grad_h(gy[..., n, j], grid)
    t1 = np.einsum("...njm,...ln->...jlm", ggy, dv)
    t2 = np.einsum("...nj,...lnm->...jlm", gy, hv)
    t3 = np.einsum("...nlm,...jn->...jlm", ggy, dv)
    t4 = np.einsum("...nl,...jnm->...jlm", gy, hv)
    return 0.5 * (t1 + t2 + t3 + t4)


def apply_transformed_hibler(u_tilde, flow, params, grid, grad_y=None):
    """Nodal values of the transformed ice-stress operator applied to v_tilde.

    Principal part: sum_{jklm} (d_k Y_m)(-a_ij^kl) d_m eps_jl; gradient part:
    (1 / (2 rho h Delta)) sum_jk (d_j Y_k)(d_k P)(S eps)_ij with dP expanded
    through the ice-strength closed form.  With the identity flow this is the
    nondivergence expansion of (1/(rho h)) div S_delta.
    """
    if grad_y is None:
        grad_y = flow.grad_y() if isinstance(flow, FlowMap) else np.asarray(flow)
    eps = transformed_strain(u_tilde.v, grad_y, grid)
    coeffs = coeff_tensor(eps, u_tilde.h, u_tilde.a, params)
    b = -coeffs.a
    deps = strain_gradient(eps, grid)
    gy = np.asarray(grad_y)
    # Eulerian derivative of the strain: sum_m (d_k Y_m) d_m eps_jl
    deps_x = np.einsum("...mk,...jlm->...jlk", gy, deps)
    principal = np.einsum("...ijkl,...jlk->...i", b, deps_x)

    se = s_apply(eps, params.e)
    dP = (
        ice_strength_dh(u_tilde.h, u_tilde.a, params)[..., None] * grad_h(u_tilde.h, grid)
        + ice_strength_da(u_tilde.h, u_tilde.a, params)[..., None] * grad_h(u_tilde.a, grid)
    )
    # dP_x[..., j] = sum_k (d_j Y_k) d_k P
    dP_x = np.einsum("...kj,...k->...j", gy, dP)
    se_mat = np.empty(eps.e11.shape + (2, 2))
    se_mat[..., 0, 0] = se.e11
    se_mat[..., 0, 1] = se_mat[..., 1, 0] = se.e12
    se_mat[..., 1, 1] = se.e22
    denom = 2.0 * params.rho_ice * u_tilde.h * coeffs.delta_reg
    lower = np.einsum("...ij,...j->...i", se_mat, dP_x) / denom[..., None]
    return principal + lower


def transformed_div(v_tilde, grad_y, grid):
    """Transformed velocity divergence sum_jk (d_j Y_k) d_k v_j."""
    dv = _velocity_gradient(v_tilde, grid)
    return np.einsum("...kj,...jk->...", np.asarray(grad_y), dv)


def transformed_b(u_tilde, grad_y, params, grid):
    """Transformed ice-strength gradient term (maps (h, a) into the momentum rows)."""
    dP = (
        ice_strength_dh(u_tilde.h, u_tilde.a, params)[..., None] * grad_h(u_tilde.h, grid)
        + ice_strength_da(u_tilde.h, u_tilde.a, params)[..., None] * grad_h(u_tilde.a, grid)
    )
    dP_x = np.einsum("...ji,...j->...i", np.asarray(grad_y), dP)
    return dP_x / (2.0 * params.rho_ice * u_tilde.h)[..., None]


def perp(v):
    """v^perp = (-v2, v1)."""
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def atm_drag(v_atm, params):
    """Wind stress rho_atm C_atm |V| R V."""
    speed = np.linalg.norm(v_atm, axis=-1, keepdims=True)
    rotated = np.einsum("ab,...b->...a", params.R_atm, v_atm)
    return params.rho_atm * params.C_atm * speed * rotated


def ocean_drag(v, v_ocn, params):
    """Ocean stress rho_ocn C_ocn |V - v| R (V - v)."""
    dv = v_ocn - v
    speed = np.linalg.norm(dv, axis=-1, keepdims=True)
    rotated = np.einsum("ab,...b->...a", params.R_ocn, dv)
    return params.rho_ocn * params.C_ocn * speed * rotated


def _forcing_in_flow_coords(forcing, fmap, t):
    """Wind, current and surface tilt seen along the flow map."""
    va = forcing.v_atm(t)
    vo = forcing.v_ocn(t)
    gH = forcing.grad_h_surf(t)
    if not forcing.spatially_constant:
        va = compose_with_map(va, fmap, "forward")
        vo = compose_with_map(vo, fmap, "forward")
        gH = compose_with_map(gH, fmap, "forward")
    return va, vo, gH


def assemble_rhs(u_hat, ref_state, u0, fmap, params, grid, forcing, t, omega, op,
                 grad_y=None):
    """Right-hand sides (F1, F2, F3) of the zero-initial-value problem.

    The frozen operator and coupling block are applied through the assembled
    sparse matrices so they cancel the left-hand side exactly at the discrete
    level.  Raises BlowupSignal when the composite state leaves the
    admissible region.
    """
    u_tilde = u_hat + ref_state
    report = validate_state(u_tilde, params)
    if not report.in_v:
        raise BlowupSignal(f"iterate left V at t = {t:.6g}: {report}", time=t, report=report)
    if grad_y is None:
        grad_y = fmap.grad_y()
    vt = u_tilde.v

    f1 = apply_transformed_hibler(u_tilde, fmap, params, grid, grad_y=grad_y)
    f1 -= op.apply_hibler(vt)
    f1 -= transformed_b(u_tilde, grad_y, params, grid) - op.apply_b1(u_tilde.h, u_tilde.a)
    f1 += omega * vt - params.c_cor * perp(vt)
    va, vo, gH = _forcing_in_flow_coords(forcing, fmap, t)
    f1 -= params.g * gH
    f1 += (atm_drag(va, params) + ocean_drag(vt, vo, params)) / (
        params.rho_ice * u_tilde.h
    )[..., None]

    tdiv = transformed_div(vt, grad_y, grid)
    plain_div = div_h(vt, grid)
    f2 = u0.h * plain_div - u_tilde.h * tdiv + omega * u_tilde.h
    f3 = u0.a * plain_div - u_tilde.a * tdiv + omega * u_tilde.a
    if forcing.f_gr is not None:
        f2 = f2 + source_h(u_tilde.h, u_tilde.a, forcing.f_gr)
        f3 = f3 + source_a(u_tilde.h, u_tilde.a, forcing.f_gr, params.kappa)
    return f1, f2, f3


def build_flow_maps(v_states, grid, dt):
    """Trapezoidal flow maps along a velocity trajectory; maps[0] = identity."""
    maps = [FlowMap.identity(grid)]
    for n in range(len(v_states) - 1):
        maps.append(advance_flow_map(maps[-1], v_states[n], v_states[n + 1], dt))
    return maps


@dataclass
class PicardState:
    """Bookkeeping of one fixed-point run."""

    k: int = 0
    deltas: list = field(default_factory=list)       # |u_hat^k - u_hat^{k-1}| in E1
    ratios: list = field(default_factory=list)       # delta_{k+1} / delta_k
    health: list = field(default_factory=list)       # worst HealthReport per iterate
    margins: list = field(default_factory=list)      # (margin_h, margin_a) per iterate

    def iteration_rows(self):
        rows = []
        for i, d in enumerate(self.deltas):
            r = self.ratios[i - 1] if i >= 1 else np.nan
            hp = self.health[i] if i < len(self.health) else None
            mg = self.margins[i] if i < len(self.margins) else (np.nan, np.nan)
            rows.append(
                [
                    i + 1,
                    d,
                    r,
                    hp.sup_dev if hp else np.nan,
                    hp.min_det if hp else np.nan,
                    mg[0],
                    mg[1],
                ]
            )
        return rows


@dataclass
class PicardResult:
    """Converged fixed-point solve plus its diagnostics."""

    state: PicardState
    trajectory: object            # LinearTrajectory of u_tilde
    u_hat: object                 # LinearTrajectory of the deviation
    reference: object             # ReferenceSolution
    flows: list                   # FlowMap per time node (final iterate)
    omega: float
    T: float
    dt: float
    halvings: int
    iterations: int
    termination: str

    @property
    def deltas(self):
        return self.state.deltas

    @property
    def ratios(self):
        return self.state.ratios


def _zero_traj(nsteps, ndof):
    return [np.zeros(ndof) for _ in range(nsteps + 1)]


def picard_solve(
    u0,
    params,
    grid,
    forcing,
    T,
    dt,
    tol=1e-8,
    kmax=40,
    omega=None,
    max_halvings=6,
    det_floor=DET_FLOOR_DEFAULT,
    scheme="backward-euler",
    norms=None,
    min_steps=4,
):
    """Fixed-point iteration for the transformed system.

    Iterates u_hat^{k+1} = solve(A(u0) + omega, 0, F(u_hat^k)), rebuilding
    the flow map from the composite velocity each sweep.  Stops at
    delta_{k+1} <= tol * max(1, |u_hat^1|).  When the flow map fails the
    1/2-criterion, or the ratios exceed 1 three times in a row, the horizon
    is halved and the iteration restarts; after ``max_halvings`` halvings
    the run aborts.
    """
    report = validate_state(u0, params)
    if not report.in_v:
        raise ValueError(f"initial data outside admissible set: {report}")
    if norms is None:
        norms = NormSuite(grid)
    if omega is None:
        omega, _ = select_omega(u0, params, grid)
    op = assemble_operator_matrix(u0, params, grid, omega)

    T_cur = float(T)
    halvings = 0
    while True:
        nsteps = int(round(T_cur / dt))
        dt_cur = dt if nsteps >= min_steps else T_cur / min_steps
        nsteps = max(nsteps, min_steps)
        if abs(nsteps * dt_cur - T_cur) > 1e-9 * T_cur:
            dt_cur = T_cur / nsteps
        times = time_grid(T_cur, dt_cur)

        reference, _ = solve_reference(u0, params, grid, omega, T_cur, dt_cur, scheme, norms=None)
        ref_states = reference.trajectory.states()
        ref_xs = reference.trajectory.xs

        ndof = op.n
        hat_xs = _zero_traj(nsteps, ndof)
        hat_states = [unpack_state(x, grid) for x in hat_xs]
        st = PicardState()
        halve_reason = None
        converged = False
        final_traj = None

        for k in range(1, kmax + 1):
            tilde_states = [hat_states[n] + ref_states[n] for n in range(nsteps + 1)]
            flows = build_flow_maps([s.v for s in tilde_states], grid, dt_cur)
            reports = [invertibility_check(m) for m in flows]
            worst = max(reports, key=lambda r: r.sup_dev)
            if not all(r.flag for r in reports):
                halve_reason = (
                    f"flow-map criterion failed: sup|grad X - Id| = {worst.sup_dev:.4g} "
                    f"> 1/2 at t = {worst.t:.6g}"
                )
                break
            grad_ys = [m.grad_y(det_floor) for m in flows]

            fs = []
            vmargins = (np.inf, np.inf)
            for n in range(nsteps + 1):
                f1, f2, f3 = assemble_rhs(
                    hat_states[n],
                    ref_states[n],
                    u0,
                    flows[n],
                    params,
                    grid,
                    forcing,
                    times[n],
                    omega,
                    op,
                    grad_y=grad_ys[n],
                )
                fs.append(pack_state(StateField(f1, f2, f3), grid))
                rep = validate_state(tilde_states[n], params)
                vmargins = (min(vmargins[0], rep.margin_h), min(vmargins[1], rep.margin_a))

            new_traj = solve_linear_ivp(op, np.zeros(ndof), fs, T_cur, dt_cur, scheme)
            new_states = new_traj.states()
            diff = [new_states[n] - hat_states[n] for n in range(nsteps + 1)]
            delta = norms.e1(diff, dt_cur)
            st.deltas.append(delta)
            st.health.append(worst)
            st.margins.append(vmargins)
            if len(st.deltas) >= 2:
                prev = st.deltas[-2]
                st.ratios.append(delta / prev if prev > 0 else 0.0)
            st.k = k
            hat_xs = new_traj.xs
            hat_states = new_states
            final_traj = new_traj
            log.info(
                "picard k=%d: delta=%.3e ratio=%s sup|gradX-Id|=%.3g",
                k,
                delta,
                f"{st.ratios[-1]:.3f}" if st.ratios else "-",
                worst.sup_dev,
            )

            if delta <= tol * max(1.0, st.deltas[0]):
                converged = True
                break
            if len(st.ratios) >= 3 and all(r >= 1.0 for r in st.ratios[-3:]):
                halve_reason = (
                    f"no contraction: ratios {st.ratios[-3:]} >= 1 three times in a row"
                )
                break

        if converged:
            tilde_xs = [hat_xs[n] + ref_xs[n] for n in range(nsteps + 1)]
            from .linear_solver import LinearTrajectory

            tilde_traj = LinearTrajectory(grid, times, tilde_xs, omega, scheme)
            flows = build_flow_maps([s.v for s in tilde_traj.states()], grid, dt_cur)
            return PicardResult(
                state=st,
                trajectory=tilde_traj,
                u_hat=final_traj,
                reference=reference,
                flows=flows,
                omega=omega,
                T=T_cur,
                dt=dt_cur,
                halvings=halvings,
                iterations=st.k,
                termination="converged",
            )

        if halve_reason is None:
            raise NoConvergence(
                f"no convergence after {kmax} iterations at T = {T_cur:.6g}; "
                f"last delta = {st.deltas[-1]:.3e}",
                deltas=st.deltas,
                ratios=st.ratios,
            )

        halvings += 1
        log.warning("halving horizon (%d/%d): %s", halvings, max_halvings, halve_reason)
        if halvings > max_halvings:
            raise InvertibilityLost(
                f"aborted after {max_halvings} horizon halvings; last trigger: {halve_reason}",
                time=T_cur,
            )
        T_cur *= 0.5


def transformed_residual(result, u0, params, grid, forcing, norms):
    """Forward residual of the transformed system along a converged trajectory.

    Backward-difference time derivative against the field-wise operators;
    Dirichlet rows excluded.  Returns the residual trajectory norm in the
    data space.
    """
    from .fields import enforce_dirichlet
    from .norms import bochner_norm

    states = result.trajectory.states()
    times = result.trajectory.times
    dt = result.trajectory.dt
    vals = [0.0]
    for n in range(1, len(states)):
        u = states[n]
        fmap = result.flows[n]
        gy = fmap.grad_y()
        va, vo, gH = _forcing_in_flow_coords(forcing, fmap, times[n])
        rhs_v = (
            apply_transformed_hibler(u, fmap, params, grid, grad_y=gy)
            - transformed_b(u, gy, params, grid)
            - params.c_cor * perp(u.v)
            - params.g * gH
            + (atm_drag(va, params) + ocean_drag(u.v, vo, params))
            / (params.rho_ice * u.h)[..., None]
        )
        tdiv = transformed_div(u.v, gy, grid)
        rhs_h = -u.h * tdiv
        rhs_a = -u.a * tdiv
        if forcing.f_gr is not None:
            rhs_h = rhs_h + source_h(u.h, u.a, forcing.f_gr)
            rhs_a = rhs_a + source_a(u.h, u.a, forcing.f_gr, params.kappa)
        du = (states[n] - states[n - 1]) * (1.0 / dt)
        res = StateField(
            enforce_dirichlet(du.v - rhs_v, grid),
            du.h - rhs_h,
            du.a - rhs_a,
        )
        vals.append(norms.x0(res))
    return bochner_norm(vals, dt, norms.p)


def dependence_experiment(
    u0,
    perturbation_sizes,
    profile,
    params,
    grid,
    forcing,
    T,
    dt,
    tol=1e-8,
    kmax=40,
    omega=None,
    norms=None,
    threads=1,
):
    """Continuous-dependence probe.

    Runs the fixed-point solve from u0 and from u0 + s * profile for each
    size s and reports rho(s) = |du_tilde|_E1 / |s profile|_gamma.
    """
    if norms is None:
        norms = NormSuite(grid)
    if omega is None:
        omega, _ = select_omega(u0, params, grid)

    def run(u_init):
        return picard_solve(
            u_init, params, grid, forcing, T, dt, tol=tol, kmax=kmax, omega=omega, norms=norms
        )

    base = run(u0)
    base_states = base.trajectory.states()

    def one(s):
        pert = run(u0 + s * profile)
        if abs(pert.T - base.T) > 1e-12 or len(pert.trajectory.xs) != len(base_states):
            raise NoConvergence(
                f"perturbed run (s={s:g}) ended on a different horizon "
                f"({pert.T:g} vs {base.T:g}); ratios are not comparable"
            )
        pert_states = pert.trajectory.states()
        diff = [pert_states[n] - base_states[n] for n in range(len(base_states))]
        dnorm = norms.e1(diff, base.dt)
        size = norms.xgamma(s * profile)
        return {"s": s, "diff_e1": dnorm, "size_gamma": size,
                "rho": dnorm / size if size > 0 else 0.0}

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, perturbation_sizes))
    else:
        rows = [one(s) for s in perturbation_sizes]
    return rows
