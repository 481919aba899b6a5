"""Pointwise viscous-plastic constitutive algebra.

Flattened 2x2 tensors use the component order (11, 12, 21, 22) throughout.
The 4-index coefficient array ``a[i, j, k, l]`` multiplies the second
derivative D_k D_l of velocity component j in the i-th equation; its entries
pair the yield-curve matrix as ``S[(i,k), (j,l)]``, the grouping under which
the nondivergence form reproduces the divergence of the regularized stress
exactly (verified against that oracle in the test suite).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AssemblyError

_PAIR = {(0, 0): 0, (0, 1): 1, (1, 0): 2, (1, 1): 3}


@dataclass
class Strain:
    """Symmetric 2x2 strain-rate tensor; e21 == e12 by storage convention."""

    e11: np.ndarray
    e12: np.ndarray
    e22: np.ndarray

    def __post_init__(self):
        self.e11 = np.asarray(self.e11, dtype=float)
        self.e12 = np.asarray(self.e12, dtype=float)
        self.e22 = np.asarray(self.e22, dtype=float)

    @classmethod
    def zero(cls, shape=()):
        z = np.zeros(shape)
        return cls(z.copy(), z.copy(), z.copy())

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=float)
        if not np.allclose(m[..., 0, 1], m[..., 1, 0]):
            raise ValueError("strain matrix is not symmetric")
        return cls(m[..., 0, 0], m[..., 0, 1], m[..., 1, 1])

    def component(self, i, j):
        if i == 0 and j == 0:
            return self.e11
        if i == 1 and j == 1:
            return self.e22
        return self.e12

    def as_matrix(self):
        return np.stack(
            [
                np.stack([self.e11, self.e12], axis=-1),
                np.stack([self.e12, self.e22], axis=-1),
            ],
            axis=-2,
        )

    @property
    def shape(self):
        return self.e11.shape


def s_matrix(e):
    """The 4x4 yield-curve matrix acting on flattened strains."""
    g = 1.0 / e**2
    return np.array(
        [
            [1 + g, 0, 0, 1 - g],
            [0, g, g, 0],
            [0, g, g, 0],
            [1 - g, 0, 0, 1 + g],
        ]
    )


def s_apply(eps, e):
    """Matrix action of S on a strain; returns another Strain (S eps is symmetric)."""
    g = 1.0 / e**2
    s11 = (1 + g) * eps.e11 + (1 - g) * eps.e22
    s12 = 2 * g * eps.e12
    s22 = (1 - g) * eps.e11 + (1 + g) * eps.e22
    return Strain(s11, s12, s22)


def delta_sq(eps, e):
    """Squared deformation measure of the elliptical yield curve.

    Equals the quadratic form eps : (S eps); both routes are asserted to
    agree in the test suite.
    """
    g = 1.0 / e**2
    return (
        (eps.e11**2 + eps.e22**2) * (1 + g)
        + 4 * g * eps.e12**2
        + 2 * eps.e11 * eps.e22 * (1 - g)
    )


def delta_reg(eps, delta, e):
    """Regularized deformation measure sqrt(delta + Delta^2).

    delta >= 0 is accepted here so offline oracles can evaluate the
    unregularized limit; runtime parameter validation enforces delta > 0.
    """
    if np.any(np.asarray(delta) < 0):
        raise ValueError("delta must be nonnegative")
    return np.sqrt(delta + delta_sq(eps, e))


def ice_strength(h, a, params):
    """Ice strength P = p* h exp(-c_bullet (1 - a))."""
    return params.p_star * np.asarray(h) * np.exp(-params.c_bullet * (1.0 - np.asarray(a)))


def ice_strength_dh(h, a, params):
    """dP/dh = p* exp(-c_bullet (1 - a))."""
    return params.p_star * np.exp(-params.c_bullet * (1.0 - np.asarray(a))) * np.ones_like(np.asarray(h, dtype=float))


def ice_strength_da(h, a, params):
    """dP/da = c_bullet P."""
    return params.c_bullet * ice_strength(h, a, params)


def viscosities(eps, P, params):
    """Regularized bulk and shear viscosities (zeta, eta)."""
    zeta = np.asarray(P) / (2.0 * delta_reg(eps, params.delta, params.e))
    return zeta, zeta / params.e**2


def stress_sigma(eps, h, a, params, delta=None):
    """Regularized stress tensor, via the viscosity form.

    Returns a Strain-shaped symmetric tensor.  The equivalent form
    (P/2) (S eps / Delta_delta) - (P/2) Id is used as an internal
    consistency oracle in the tests.
    """
    if delta is None:
        delta = params.delta
    P = ice_strength(h, a, params)
    dd = delta_reg(eps, delta, params.e)
    zeta = P / (2.0 * dd)
    eta = zeta / params.e**2
    tr = eps.e11 + eps.e22
    s11 = 2 * eta * eps.e11 + (zeta - eta) * tr - P / 2.0
    s12 = 2 * eta * eps.e12
    s22 = 2 * eta * eps.e22 + (zeta - eta) * tr - P / 2.0
    return Strain(s11, s12, s22)


@dataclass
class CoeffTensor:
    """Per-node coefficients of the linearized principal part.

    ``a`` has shape (..., 2, 2, 2, 2) indexed [i, j, k, l]; ``P`` and
    ``delta_reg`` are the scalar fields entering assembly.
    """

    a: np.ndarray
    P: np.ndarray
    delta_reg: np.ndarray


def coeff_tensor(eps, h, a, params, check_admissible=True):
    """Coefficients a_ij^kl of the linearized principal part, per node.

    a[i,j,k,l] = -(P / (2 rho h Delta)) (S[(i,k),(j,l)] - (Se)_ik (Se)_jl / Delta^2).

    At eps = 0 this reduces to -(P / (2 rho h)) S[(i,k),(j,l)] / sqrt(delta).
    """
    h = np.asarray(h, dtype=float)
    if check_admissible and np.any(h < params.kappa):
        raise AssemblyError(
            f"thickness below floor: min h = {h.min():.3g} < kappa = {params.kappa:.3g}"
        )
    P = ice_strength(h, a, params)
    dd = delta_reg(eps, params.delta, params.e)
    se = s_apply(eps, params.e)
    s4 = s_matrix(params.e)
    pref = -P / (2.0 * params.rho_ice * h * dd)
    out = np.empty(np.broadcast(eps.e11, h).shape + (2, 2, 2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                for l in range(2):
                    s_entry = s4[_PAIR[(i, k)], _PAIR[(j, l)]]
                    corr = se.component(i, k) * se.component(j, l) / dd**2
                    out[..., i, j, k, l] = pref * (s_entry - corr)
    return CoeffTensor(out, np.broadcast_to(P, out.shape[:-4]).copy(), dd)


def symbol_matrix(coeffs, xi):
    """Principal symbol M_ij = sum_kl a_ij^kl xi_k xi_l at one node.

    For admissible states (P > 0, h >= kappa) the symmetric part of M is
    negative definite: the desk-scale shadow of parabolicity.
    """
    xi = np.asarray(xi, dtype=float)
    if abs(np.linalg.norm(xi) - 1.0) > 1e-12:
        raise ValueError(f"xi must be a unit vector, |xi| = {np.linalg.norm(xi)}")
    a = coeffs.a if isinstance(coeffs, CoeffTensor) else np.asarray(coeffs)
    if a.shape[-4:] != (2, 2, 2, 2):
        raise ValueError("need a (2,2,2,2) coefficient block")
    return np.einsum("...ijkl,k,l->...ij", a, xi, xi)
