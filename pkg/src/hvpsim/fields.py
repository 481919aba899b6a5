"""Grids, state fields, parameters, forcing, interpolation, and admissibility.

Array conventions used throughout the package:

* scalar fields have shape ``(nx, ny)`` with ``field[i, j]`` sampled at
  ``(x0 + i*dx, y0 + j*dy)``;
* vector fields stack the two components last, shape ``(nx, ny, 2)``;
* 2x2 tensor fields use shape ``(nx, ny, 2, 2)`` with ``t[..., a, b]``
  holding the Jacobian-style entry "component a, derivative direction b".

Snapshot file format (little endian):

    bytes 0..3    magic ``HVPF``
    bytes 4..5    format version (u16, currently 1)
    bytes 6..9    nx (u32)
    bytes 10..13  ny (u32)
    bytes 14..17  component count (u32)
    bytes 18..23  reserved (zero)
    bytes 24..    components, each nx*ny float64 values, row-major
                  (index i outer, j inner)
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .errors import CorruptFieldError

log = logging.getLogger(__name__)

SNAPSHOT_MAGIC = b"HVPF"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sHIII6x")


class Grid:
    """Uniform collocated node grid on an axis-aligned rectangle."""

    def __init__(self, nx, ny, dx, dy, x0=0.0, y0=0.0):
        if nx < 4 or ny < 4:
            raise ValueError(f"need nx, ny >= 4, got {nx}x{ny}")
        if dx <= 0 or dy <= 0:
            raise ValueError(f"need positive spacings, got dx={dx}, dy={dy}")
        self.nx = int(nx)
        self.ny = int(ny)
        self.dx = float(dx)
        self.dy = float(dy)
        self.x0 = float(x0)
        self.y0 = float(y0)
        self.xs = x0 + dx * np.arange(self.nx)
        self.ys = y0 + dy * np.arange(self.ny)
        self.X, self.Y = np.meshgrid(self.xs, self.ys, indexing="ij")
        mask = np.zeros((self.nx, self.ny), dtype=bool)
        mask[0, :] = mask[-1, :] = True
        mask[:, 0] = mask[:, -1] = True
        self.boundary_mask = mask

    @classmethod
    def unit_square(cls, n):
        """n x n nodes on [0,1]^2."""
        return cls(n, n, 1.0 / (n - 1), 1.0 / (n - 1))

    @property
    def shape(self):
        return (self.nx, self.ny)

    @property
    def lx(self):
        return (self.nx - 1) * self.dx

    @property
    def ly(self):
        return (self.ny - 1) * self.dy

    @property
    def n_interior(self):
        return (self.nx - 2) * (self.ny - 2)

    @property
    def n_nodes(self):
        return self.nx * self.ny

    def positions(self):
        """Node coordinates as an (nx, ny, 2) array."""
        return np.stack([self.X, self.Y], axis=-1)

    def __eq__(self, other):
        return (
            isinstance(other, Grid)
            and (self.nx, self.ny) == (other.nx, other.ny)
            and np.isclose(self.dx, other.dx)
            and np.isclose(self.dy, other.dy)
            and np.isclose(self.x0, other.x0)
            and np.isclose(self.y0, other.y0)
        )

    def __repr__(self):
        return f"Grid({self.nx}x{self.ny}, dx={self.dx:.4g}, dy={self.dy:.4g})"


@dataclass
class StateField:
    """Principal variable triple: velocity, mean thickness, concentration."""

    v: np.ndarray  # (nx, ny, 2)
    h: np.ndarray  # (nx, ny)
    a: np.ndarray  # (nx, ny)

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=float)
        self.h = np.asarray(self.h, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        if self.v.shape != self.h.shape + (2,) or self.h.shape != self.a.shape:
            raise ValueError(
                f"inconsistent shapes v={self.v.shape} h={self.h.shape} a={self.a.shape}"
            )

    @classmethod
    def zeros(cls, grid):
        return cls(
            np.zeros((grid.nx, grid.ny, 2)),
            np.zeros((grid.nx, grid.ny)),
            np.zeros((grid.nx, grid.ny)),
        )

    def copy(self):
        return StateField(self.v.copy(), self.h.copy(), self.a.copy())

    def __add__(self, other):
        return StateField(self.v + other.v, self.h + other.h, self.a + other.a)

    def __sub__(self, other):
        return StateField(self.v - other.v, self.h - other.h, self.a - other.a)

    def __mul__(self, c):
        return StateField(self.v * c, self.h * c, self.a * c)

    __rmul__ = __mul__

    def is_finite(self):
        return bool(
            np.isfinite(self.v).all() and np.isfinite(self.h).all() and np.isfinite(self.a).all()
        )


def rotation_matrix(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass
class RheologyParams:
    """Physical and regularization constants (nondimensional unit system).

    Defaults follow the common sea-ice literature choices; every value is
    configuration, not ground truth.
    """

    rho_ice: float = 1.0
    e: float = 2.0               # yield-ellipse aspect ratio, > 1
    # Viscosity regularization.  Dirichlet walls force strain zeros at the
    # corners, where the stress coefficients vary like 1/delta; the default
    # keeps that variation resolvable at desk-scale grids (sqrt(delta) about
    # 15% of typical strain).  Sharper values remain available via config
    # but shrink the horizon the fixed-point solver can hold.
    delta: float = 0.02
    p_star: float = 1.0
    c_bullet: float = 20.0
    kappa: float = 1e-3          # thickness floor
    c_cor: float = 0.5           # Coriolis parameter
    g: float = 0.0               # gravity (acts through grad H)
    rho_atm: float = 0.0
    C_atm: float = 0.0
    rho_ocn: float = 1.0
    C_ocn: float = 0.1
    theta_atm: float = 0.0       # rotation angles of the drag matrices
    theta_ocn: float = 0.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        problems = []
        if self.rho_ice <= 0:
            problems.append(f"rho_ice must be > 0, got {self.rho_ice}")
        if self.e <= 1:
            problems.append(f"yield-ellipse aspect e must be > 1, got {self.e}")
        if self.delta <= 0:
            problems.append(f"regularization delta must be > 0, got {self.delta}")
        if self.p_star <= 0:
            problems.append(f"p_star must be > 0, got {self.p_star}")
        if self.c_bullet <= 0:
            problems.append(f"c_bullet must be > 0, got {self.c_bullet}")
        if self.kappa <= 0:
            problems.append(f"kappa must be > 0, got {self.kappa}")
        for name in ("c_cor", "g", "rho_atm", "C_atm", "rho_ocn", "C_ocn"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0, got {getattr(self, name)}")
        for name, R in (("R_atm", self.R_atm), ("R_ocn", self.R_ocn)):
            if not np.allclose(R.T @ R, np.eye(2), atol=1e-12) or abs(np.linalg.det(R) - 1) > 1e-12:
                problems.append(f"{name} is not a proper rotation")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def R_atm(self):
        return rotation_matrix(self.theta_atm)

    @property
    def R_ocn(self):
        return rotation_matrix(self.theta_ocn)


class ForcingFields:
    """External data: wind/ocean velocities, surface-height gradient, growth rate.

    ``v_atm``, ``v_ocn`` and ``grad_h_surf`` may be constants (2-vectors),
    callables ``t -> (nx, ny, 2)`` or ``None`` (zero).  Spatially constant
    forcing is flagged so coordinate changes can be skipped.
    """

    def __init__(self, grid, v_atm=None, v_ocn=None, grad_h_surf=None, f_gr=None):
        self.grid = grid
        self._v_atm = v_atm
        self._v_ocn = v_ocn
        self._grad_h = grad_h_surf
        self.f_gr = f_gr
        self.spatially_constant = all(
            not callable(f) for f in (v_atm, v_ocn, grad_h_surf)
        )

    def _eval(self, spec, t):
        if spec is None:
            return np.zeros((self.grid.nx, self.grid.ny, 2))
        if callable(spec):
            out = np.asarray(spec(t), dtype=float)
        else:
            out = np.broadcast_to(
                np.asarray(spec, dtype=float), (self.grid.nx, self.grid.ny, 2)
            ).copy()
        if out.shape != (self.grid.nx, self.grid.ny, 2):
            raise ValueError(f"forcing field has shape {out.shape}")
        return out

    def v_atm(self, t):
        return self._eval(self._v_atm, t)

    def v_ocn(self, t):
        return self._eval(self._v_ocn, t)

    def grad_h_surf(self, t):
        return self._eval(self._grad_h, t)

    @classmethod
    def quiescent(cls, grid, f_gr=None):
        """No wind, no ocean current, flat sea surface."""
        return cls(grid, f_gr=f_gr)


@dataclass
class AdmissibilityReport:
    """Pointwise margins to the boundary of the admissible set."""

    min_h: float
    min_a: float
    max_a: float
    margin_h: float   # min h - kappa
    margin_a: float   # min(min a, 1 - max a)
    in_v: bool

    def __str__(self):
        flag = "in V" if self.in_v else "NOT in V"
        return (
            f"{flag}: min h={self.min_h:.6g} (margin {self.margin_h:.3g}), "
            f"a in [{self.min_a:.6g}, {self.max_a:.6g}] (margin {self.margin_a:.3g})"
        )


def validate_state(u, params):
    """Check membership in V = {h > kappa, a in (0,1)}, with margins.

    Strict inequalities: a state sitting exactly on the boundary of V is
    reported as outside.  Non-finite entries are a hard error.
    """
    if not u.is_finite():
        raise CorruptFieldError("state contains non-finite entries")
    min_h = float(u.h.min())
    min_a = float(u.a.min())
    max_a = float(u.a.max())
    margin_h = min_h - params.kappa
    margin_a = min(min_a - 0.0, 1.0 - max_a)
    in_v = (min_h > params.kappa) and (min_a > 0.0) and (max_a < 1.0)
    return AdmissibilityReport(min_h, min_a, max_a, margin_h, margin_a, in_v)


def enforce_dirichlet(v, grid):
    """Return a copy of the velocity field with zeros on the boundary ring."""
    out = np.array(v, dtype=float, copy=True)
    out[grid.boundary_mask] = 0.0
    return out


def bilinear_sample(field, grid, pts):
    """Sample a nodal field at arbitrary points with bilinear interpolation.

    Points outside the domain are clamped to the boundary; the clamp count
    is logged.  Exact on affine fields at unclamped points.  Trailing
    component axes of ``field`` are carried through.
    """
    field = np.asarray(field, dtype=float)
    pts = np.asarray(pts, dtype=float)
    fx = (pts[..., 0] - grid.x0) / grid.dx
    fy = (pts[..., 1] - grid.y0) / grid.dy
    clamped = int(
        np.count_nonzero((fx < 0) | (fx > grid.nx - 1) | (fy < 0) | (fy > grid.ny - 1))
    )
    if clamped:
        log.debug("bilinear_sample: clamped %d of %d points", clamped, fx.size)
    fx = np.clip(fx, 0.0, grid.nx - 1.0)
    fy = np.clip(fy, 0.0, grid.ny - 1.0)
    i0 = np.clip(np.floor(fx).astype(int), 0, grid.nx - 2)
    j0 = np.clip(np.floor(fy).astype(int), 0, grid.ny - 2)
    tx = fx - i0
    ty = fy - j0
    extra = field.ndim - 2
    tx = tx.reshape(tx.shape + (1,) * extra)
    ty = ty.reshape(ty.shape + (1,) * extra)
    f00 = field[i0, j0]
    f10 = field[i0 + 1, j0]
    f01 = field[i0, j0 + 1]
    f11 = field[i0 + 1, j0 + 1]
    return (
        (1 - tx) * (1 - ty) * f00
        + tx * (1 - ty) * f10
        + (1 - tx) * ty * f01
        + tx * ty * f11
    )


def resample_state(u, grid, target):
    """Bilinearly resample a StateField onto another grid over the same rectangle."""
    pts = target.positions()
    return StateField(
        bilinear_sample(u.v, grid, pts),
        bilinear_sample(u.h, grid, pts),
        bilinear_sample(u.a, grid, pts),
    )


def save_snapshot(path, grid, components, names=None):
    """Write fields in the HVPF binary format.

    ``components`` is a sequence of (nx, ny) arrays or a StateField
    (serialized as v1, v2, h, a).
    """
    if isinstance(components, StateField):
        components = [components.v[..., 0], components.v[..., 1], components.h, components.a]
    comps = [np.ascontiguousarray(np.asarray(c, dtype="<f8")) for c in components]
    for c in comps:
        if c.shape != (grid.nx, grid.ny):
            raise ValueError(f"component shape {c.shape} != grid {grid.shape}")
    header = _HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, grid.nx, grid.ny, len(comps))
    with open(path, "wb") as fh:
        fh.write(header)
        for c in comps:
            fh.write(c.tobytes(order="C"))


def load_snapshot(path):
    """Read an HVPF file; returns (nx, ny, [component arrays])."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        magic, version, nx, ny, ncomp = _HEADER.unpack(raw)
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        comps = []
        for _ in range(ncomp):
            data = np.frombuffer(fh.read(nx * ny * 8), dtype="<f8")
            comps.append(data.reshape(nx, ny).copy())
    return nx, ny, comps
