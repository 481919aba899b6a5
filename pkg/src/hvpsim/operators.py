"""Discrete differential operators and frozen-coefficient operator assembly.

Unknown ordering for the stacked linear system on an (nx, ny) grid:

    x = [v1 at interior nodes, v2 at interior nodes, h at all nodes, a at all nodes]

Velocity carries homogeneous Dirichlet conditions; its boundary unknowns are
eliminated.  Thickness and concentration carry no boundary condition and live
on every node, with one-sided second-order stencils on the boundary ring.

Stencils: second-order central differences in the interior; at the boundary
(-3, 4, -1)/(2h) for first derivatives and (2, -5, 4, -1)/h^2 for second
derivatives.  Cross derivatives compose the two first-derivative operators.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import AssemblyError
from .fields import Grid, StateField, resample_state
from .rheology import Strain, coeff_tensor, ice_strength_da, ice_strength_dh

SECTOR_MAX_UNKNOWNS = 4 * 24 * 24
SECTOR_ANGLE_MARGIN = 0.05


# ---------------------------------------------------------------------------
# dense array operators
# ---------------------------------------------------------------------------

def _d1(f, h, axis):
    f = np.moveaxis(np.asarray(f, dtype=float), axis, 0)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - f[:-2]) / (2 * h)
    out[0] = (-3 * f[0] + 4 * f[1] - f[2]) / (2 * h)
    out[-1] = (3 * f[-1] - 4 * f[-2] + f[-3]) / (2 * h)
    return np.moveaxis(out, 0, axis)


def _d2(f, h, axis):
    f = np.moveaxis(np.asarray(f, dtype=float), axis, 0)
    out = np.empty_like(f)
    out[1:-1] = (f[2:] - 2 * f[1:-1] + f[:-2]) / h**2
    out[0] = (2 * f[0] - 5 * f[1] + 4 * f[2] - f[3]) / h**2
    out[-1] = (2 * f[-1] - 5 * f[-2] + 4 * f[-3] - f[-4]) / h**2
    return np.moveaxis(out, 0, axis)


def grad_h(f, grid):
    """Horizontal gradient of a scalar field, shape (..., 2)."""
    return np.stack([_d1(f, grid.dx, 0), _d1(f, grid.dy, 1)], axis=-1)


def div_h(vf, grid):
    """Horizontal divergence of a vector field (nx, ny, 2)."""
    vf = np.asarray(vf)
    return _d1(vf[..., 0], grid.dx, 0) + _d1(vf[..., 1], grid.dy, 1)


def hess_h(f, grid):
    """Hessian of a scalar field, shape (..., 2, 2), symmetrized cross term."""
    gx = _d1(f, grid.dx, 0)
    gy = _d1(f, grid.dy, 1)
    dxy = 0.5 * (_d1(gx, grid.dy, 1) + _d1(gy, grid.dx, 0))
    out = np.empty(np.asarray(f).shape + (2, 2))
    out[..., 0, 0] = _d2(f, grid.dx, 0)
    out[..., 1, 1] = _d2(f, grid.dy, 1)
    out[..., 0, 1] = dxy
    out[..., 1, 0] = dxy
    return out


def strain_of(v, grid):
    """Symmetric gradient of a velocity field."""
    v = np.asarray(v)
    d1v1 = _d1(v[..., 0], grid.dx, 0)
    d2v1 = _d1(v[..., 0], grid.dy, 1)
    d1v2 = _d1(v[..., 1], grid.dx, 0)
    d2v2 = _d1(v[..., 1], grid.dy, 1)
    return Strain(d1v1, 0.5 * (d2v1 + d1v2), d2v2)


# ---------------------------------------------------------------------------
# sparse stencil matrices
# ---------------------------------------------------------------------------

def _d1_matrix(n, h, periodic=False):
    if periodic:
        # wrap-around central differences; node n-1 is identified with node 0's
        # left neighbour in the usual circulant sense
        D = sp.diags([-1.0, 1.0], [-1, 1], shape=(n, n), format="lil")
        D[0, n - 1] = -1.0
        D[n - 1, 0] = 1.0
        return (D / (2 * h)).tocsr()
    D = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        D[i, i - 1] = -1.0
        D[i, i + 1] = 1.0
    D[0, 0], D[0, 1], D[0, 2] = -3.0, 4.0, -1.0
    D[n - 1, n - 1], D[n - 1, n - 2], D[n - 1, n - 3] = 3.0, -4.0, 1.0
    return (D / (2 * h)).tocsr()


def _d2_matrix(n, h, periodic=False):
    if periodic:
        D = sp.diags([1.0, -2.0, 1.0], [-1, 0, 1], shape=(n, n), format="lil")
        D[0, n - 1] = 1.0
        D[n - 1, 0] = 1.0
        return (D / h**2).tocsr()
    D = sp.lil_matrix((n, n))
    for i in range(1, n - 1):
        D[i, i - 1], D[i, i], D[i, i + 1] = 1.0, -2.0, 1.0
    D[0, 0], D[0, 1], D[0, 2], D[0, 3] = 2.0, -5.0, 4.0, -1.0
    D[n - 1, n - 1], D[n - 1, n - 2], D[n - 1, n - 3], D[n - 1, n - 4] = 2.0, -5.0, 4.0, -1.0
    return (D / h**2).tocsr()


class GridStencils:
    """Sparse derivative matrices over the flat node vector (index i*ny + j)."""

    _cache = {}

    def __init__(self, grid, periodic=False):
        nx, ny = grid.nx, grid.ny
        ix = sp.identity(nx, format="csr")
        iy = sp.identity(ny, format="csr")
        self.grid = grid
        self.periodic = periodic
        self.dx_full = sp.kron(_d1_matrix(nx, grid.dx, periodic), iy, format="csr")
        self.dy_full = sp.kron(ix, _d1_matrix(ny, grid.dy, periodic), format="csr")
        self.dxx_full = sp.kron(_d2_matrix(nx, grid.dx, periodic), iy, format="csr")
        self.dyy_full = sp.kron(ix, _d2_matrix(ny, grid.dy, periodic), format="csr")
        self.dxy_full = (self.dx_full @ self.dy_full).tocsr()
        flat = np.arange(nx * ny).reshape(nx, ny)
        self.interior_flat = flat[1:-1, 1:-1].ravel()

    @classmethod
    def get(cls, grid, periodic=False):
        key = (grid.nx, grid.ny, round(grid.dx, 15), round(grid.dy, 15), periodic)
        if key not in cls._cache:
            cls._cache[key] = cls(grid, periodic)
        return cls._cache[key]

    def restrict(self, mat, rows="interior", cols="interior"):
        m = mat.tocsr()
        if rows == "interior":
            m = m[self.interior_flat]
        if cols == "interior":
            m = m[:, self.interior_flat]
        return m.tocsr()

    def strain_ops(self):
        """Strain components (e11, e12, e22) at all nodes from stacked velocity.

        Velocity columns are interior unknowns (Dirichlet) unless periodic.
        Uses the same first-derivative stencils as the dense field helpers,
        so matrix and field evaluations of the strain coincide.
        """
        if not hasattr(self, "_strain_ops"):
            cols = "all" if self.periodic else "interior"
            dx = self.restrict(self.dx_full, rows="all", cols=cols)
            dy = self.restrict(self.dy_full, rows="all", cols=cols)
            z = sp.csr_matrix(dx.shape)
            self._strain_ops = [
                sp.hstack([dx, z], format="csr"),
                sp.hstack([0.5 * dy, 0.5 * dx], format="csr"),
                sp.hstack([z, dy], format="csr"),
            ]
        return self._strain_ops

    def strain_derivative_ops(self):
        """d_k of each strain component at unknown-row nodes, composed stencils.

        ops[s][k] maps stacked velocity to d_k eps_s; matches differencing the
        nodal strain field with the dense gradient exactly.
        """
        if not hasattr(self, "_strain_deriv_ops"):
            rows = "all" if self.periodic else "interior"
            dk = [
                self.restrict(self.dx_full, rows=rows, cols="all"),
                self.restrict(self.dy_full, rows=rows, cols="all"),
            ]
            self._strain_deriv_ops = [
                [(dk[k] @ e).tocsr() for k in range(2)] for e in self.strain_ops()
            ]
        return self._strain_deriv_ops


def interior_values(field, grid):
    return np.asarray(field)[1:-1, 1:-1].ravel()


def pack_state(u, grid):
    """StateField -> stacked unknown vector."""
    return np.concatenate(
        [
            interior_values(u.v[..., 0], grid),
            interior_values(u.v[..., 1], grid),
            np.asarray(u.h).ravel(),
            np.asarray(u.a).ravel(),
        ]
    )


def unpack_state(x, grid):
    """Stacked unknown vector -> StateField with zero Dirichlet boundary."""
    ni = grid.n_interior
    na = grid.n_nodes
    v = np.zeros((grid.nx, grid.ny, 2))
    v[1:-1, 1:-1, 0] = x[:ni].reshape(grid.nx - 2, grid.ny - 2)
    v[1:-1, 1:-1, 1] = x[ni : 2 * ni].reshape(grid.nx - 2, grid.ny - 2)
    h = x[2 * ni : 2 * ni + na].reshape(grid.nx, grid.ny).copy()
    a = x[2 * ni + na :].reshape(grid.nx, grid.ny).copy()
    return StateField(v, h, a)


# ---------------------------------------------------------------------------
# frozen-coefficient assembly
# ---------------------------------------------------------------------------

def _frozen_fields(u1, params, grid):
    eps1 = strain_of(u1.v, grid)
    if np.any(u1.h < params.kappa):
        raise AssemblyError(
            f"frozen state inadmissible: min h = {u1.h.min():.4g} < kappa = {params.kappa:.4g}"
        )
    coeffs = coeff_tensor(eps1, u1.h, u1.a, params)
    return eps1, coeffs


def assemble_linearized_hibler(u1, params, grid, periodic=False):
    """Sparse matrix of the frozen-coefficient linearized ice-stress operator.

    Acts on stacked velocity [v1, v2]; rows/columns over interior nodes with
    Dirichlet elimination, or over all nodes with wrapped stencils when
    periodic (no boundary, used by symbol-consistency probes).

    The second-order part is discretized as coefficients times first
    derivatives of the nodal strain (D_k D_l realized as -d_k d_l through the
    composed stencils).  This matches the nodal evaluation of the transformed
    operator mode by mode, so freezing the flow at the identity reproduces
    the matrix exactly; a direct d_k d_l discretization would disagree with
    it at order one on grid-scale modes and destabilize the fixed-point
    sweeps under refinement.

    The matrix represents the operator itself (dissipative); the evolution
    matrix uses its negative plus a shift.
    """
    st = GridStencils.get(grid, periodic)
    eps1, coeffs = _frozen_fields(u1, params, grid)

    def coef(values):
        vals = values if periodic else values[1:-1, 1:-1]
        return sp.diags(np.asarray(vals).ravel())

    # principal part: sum_jkl (-a_ij^kl) d_k eps_jl over the symmetric storage
    b = -coeffs.a
    deps = st.strain_derivative_ops()
    blocks = []
    for i in range(2):
        acc = None
        for k in range(2):
            weights = [
                b[..., i, 0, k, 0],                      # eps_11
                b[..., i, 0, k, 1] + b[..., i, 1, k, 0],  # eps_12 (+ eps_21)
                b[..., i, 1, k, 1],                      # eps_22
            ]
            for s in range(3):
                term = coef(weights[s]) @ deps[s][k]
                acc = term if acc is None else acc + term
        blocks.append(acc)

    # lower-order part: (1/(2 rho h Delta)) sum_j (d_j P) (S eps(v))_ij
    gam = 1.0 / params.e**2
    P_h = ice_strength_dh(u1.h, u1.a, params)
    P_a = ice_strength_da(u1.h, u1.a, params)
    gh = grad_h(u1.h, grid)
    ga = grad_h(u1.a, grid)
    denom = 2.0 * params.rho_ice * u1.h * coeffs.delta_reg
    w1 = (P_h * gh[..., 0] + P_a * ga[..., 0]) / denom
    w2 = (P_h * gh[..., 1] + P_a * ga[..., 1]) / denom
    rows = "all" if periodic else "interior"
    e_ops = [st.restrict(e, rows=rows, cols="skip") for e in st.strain_ops()]
    # (S eps)_11 = (1+g) e11 + (1-g) e22 ; _12 = 2 g e12 ; _22 = (1-g) e11 + (1+g) e22
    se = [
        ((1 + gam), 0.0, (1 - gam)),
        (0.0, 2 * gam, 0.0),
        ((1 - gam), 0.0, (1 + gam)),
    ]

    def se_op(comp):
        c = se[comp]
        return sum(c[s] * e_ops[s] for s in range(3) if c[s] != 0.0)

    lower = [
        coef(w1) @ se_op(0) + coef(w2) @ se_op(1),
        coef(w1) @ se_op(1) + coef(w2) @ se_op(2),
    ]
    half = blocks[0].shape[1] // 2
    out = sp.vstack(
        [blocks[0] + lower[0], blocks[1] + lower[1]], format="csr"
    )
    assert out.shape == (2 * half, 2 * half)
    return out


def assemble_B1(u1, params, grid):
    """Coupling block mapping stacked (h, a) to the stacked velocity rows.

    (B1 (h,a))_i = (dP/dh / (2 rho h1)) d_i h + (dP/da / (2 rho h1)) d_i a,
    with the ice-strength derivatives expanded analytically.
    """
    if np.any(u1.h < params.kappa):
        raise AssemblyError("frozen state inadmissible for B1 assembly")
    st = GridStencils.get(grid)
    g1 = st.restrict(st.dx_full, rows="interior", cols="all")
    g2 = st.restrict(st.dy_full, rows="interior", cols="all")
    ch = (ice_strength_dh(u1.h, u1.a, params) / (2 * params.rho_ice * u1.h))[1:-1, 1:-1].ravel()
    ca = (ice_strength_da(u1.h, u1.a, params) / (2 * params.rho_ice * u1.h))[1:-1, 1:-1].ravel()
    dh_blocks = [sp.diags(ch) @ g1, sp.diags(ch) @ g2]
    da_blocks = [sp.diags(ca) @ g1, sp.diags(ca) @ g2]
    return sp.bmat([[dh_blocks[0], da_blocks[0]], [dh_blocks[1], da_blocks[1]]], format="csr")


@dataclass
class OperatorMatrix:
    """Assembled evolution matrix for d/dt x + A x = f with block access."""

    matrix: sp.csr_matrix
    grid: Grid
    omega: float
    hibler: sp.csr_matrix      # linearized stress operator on v unknowns
    b1: sp.csr_matrix          # (h,a) -> v rows
    div_v: sp.csr_matrix       # v unknowns -> divergence at all nodes
    h_row: sp.csr_matrix       # diag(h1) @ div_v
    a_row: sp.csr_matrix
    _factor_cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self):
        return self.matrix.shape[0]

    def apply_hibler(self, v):
        """Apply the frozen stress operator to a velocity field; zero boundary."""
        ni = self.grid.n_interior
        vin = np.concatenate(
            [interior_values(v[..., 0], self.grid), interior_values(v[..., 1], self.grid)]
        )
        out = self.hibler @ vin
        res = np.zeros((self.grid.nx, self.grid.ny, 2))
        res[1:-1, 1:-1, 0] = out[:ni].reshape(self.grid.nx - 2, self.grid.ny - 2)
        res[1:-1, 1:-1, 1] = out[ni:].reshape(self.grid.nx - 2, self.grid.ny - 2)
        return res

    def apply_b1(self, h, a):
        """Apply the coupling block to thickness/concentration fields."""
        ni = self.grid.n_interior
        x = np.concatenate([np.asarray(h).ravel(), np.asarray(a).ravel()])
        out = self.b1 @ x
        res = np.zeros((self.grid.nx, self.grid.ny, 2))
        res[1:-1, 1:-1, 0] = out[:ni].reshape(self.grid.nx - 2, self.grid.ny - 2)
        res[1:-1, 1:-1, 1] = out[ni:].reshape(self.grid.nx - 2, self.grid.ny - 2)
        return res

    def solver(self, key, build):
        """Cache LU factorizations per (scheme, dt)."""
        if key not in self._factor_cache:
            self._factor_cache[key] = build()
        return self._factor_cache[key]


def assemble_operator_matrix(u1, params, grid, omega):
    """Full evolution block matrix over [v1, v2, h, a].

    Rows: velocity (-H + omega) v + B1 (h, a); thickness h1 div v + omega h;
    concentration a1 div v + omega a.
    """
    hib = assemble_linearized_hibler(u1, params, grid)
    b1 = assemble_B1(u1, params, grid)
    st = GridStencils.get(grid)
    ni, na = grid.n_interior, grid.n_nodes
    divx = st.restrict(st.dx_full, rows="all", cols="interior")
    divy = st.restrict(st.dy_full, rows="all", cols="interior")
    div_v = sp.hstack([divx, divy], format="csr")
    h_row = sp.diags(np.asarray(u1.h).ravel()) @ div_v
    a_row = sp.diags(np.asarray(u1.a).ravel()) @ div_v
    eye_v = sp.identity(2 * ni, format="csr")
    eye_s = sp.identity(na, format="csr")
    mat = sp.bmat(
        [
            [-hib + omega * eye_v, b1[:, :na], b1[:, na:]],
            [h_row, omega * eye_s, None],
            [a_row, None, omega * eye_s],
        ],
        format="csr",
    )
    return OperatorMatrix(mat, grid, omega, hib, b1, div_v, h_row, a_row)


def dirichlet_laplacian(grid):
    """Discrete Dirichlet Laplacian on interior nodes (spectral reference)."""
    st = GridStencils.get(grid)
    return st.restrict(st.dxx_full) + st.restrict(st.dyy_full)


# ---------------------------------------------------------------------------
# spectral sector probe and shift selection
# ---------------------------------------------------------------------------

@dataclass
class SectorEntry:
    omega: float
    min_real: float
    max_abs_arg: float
    passed: bool


@dataclass
class SectorReport:
    entries: list
    angle_max: float
    chosen_omega: float | None

    def __str__(self):
        lines = [f"sector probe (target |arg| < {self.angle_max:.4f}):"]
        for e in self.entries:
            status = "pass" if e.passed else "FAIL"
            lines.append(
                f"  omega={e.omega:g}: min Re = {e.min_real:.4g}, "
                f"max |arg| = {e.max_abs_arg:.4f} [{status}]"
            )
        lines.append(f"  chosen omega: {self.chosen_omega}")
        return "\n".join(lines)


def spectrum(op):
    """Dense eigenvalues of an assembled evolution matrix."""
    if op.n > SECTOR_MAX_UNKNOWNS:
        raise AssemblyError(
            f"dense eigensolve refused: {op.n} unknowns > {SECTOR_MAX_UNKNOWNS}"
        )
    return scipy.linalg.eigvals(op.matrix.toarray())


def sector_probe(u1, params, grid, omega_grid, angle_margin=SECTOR_ANGLE_MARGIN):
    """Eigenvalue sector check of the shifted evolution matrix.

    For each shift, requires every eigenvalue to satisfy Re > 0 and
    |arg| <= pi/2 - margin.  Returns the report with the smallest passing
    shift (None if none passed).
    """
    angle_max = np.pi / 2 - angle_margin
    entries = []
    chosen = None
    for omega in sorted(omega_grid):
        op = assemble_operator_matrix(u1, params, grid, omega)
        eig = spectrum(op)
        min_real = float(eig.real.min())
        max_arg = float(np.abs(np.angle(eig)).max())
        ok = (min_real > 0) and (max_arg <= angle_max)
        entries.append(SectorEntry(float(omega), min_real, max_arg, ok))
        if ok and chosen is None:
            chosen = float(omega)
    return SectorReport(entries, angle_max, chosen)


def select_omega(
    u1,
    params,
    grid,
    start=1.0,
    angle_margin=SECTOR_ANGLE_MARGIN,
    max_doublings=24,
    proxy_n=8,
):
    """Shift-selection policy: double omega until the sector probe passes.

    The probe runs on a coarse proxy of the frozen coefficients (default
    8x8) so the dense eigensolve stays cheap at any production resolution.
    """
    if grid.nx > proxy_n or grid.ny > proxy_n:
        cgrid = Grid(
            proxy_n,
            proxy_n,
            grid.lx / (proxy_n - 1),
            grid.ly / (proxy_n - 1),
            grid.x0,
            grid.y0,
        )
        cu = resample_state(u1, grid, cgrid)
        cu = StateField(np.zeros((proxy_n, proxy_n, 2)) + cu.v, cu.h, cu.a)
    else:
        cgrid, cu = grid, u1
    omega = float(start)
    for _ in range(max_doublings):
        report = sector_probe(cu, params, cgrid, [omega], angle_margin)
        if report.chosen_omega is not None:
            return omega, report
        omega *= 2.0
    raise AssemblyError(f"no passing shift found up to omega = {omega:g}")


def dump_operator(op, path):
    """Coordinate-list text dump (row, col, value per line)."""
    coo = op.matrix.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# {coo.shape[0]} x {coo.shape[1]}, nnz = {coo.nnz}\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r} {c} {v:.17g}\n")
