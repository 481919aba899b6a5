"""Thermodynamic source terms for thickness and concentration."""

from __future__ import annotations

import numpy as np


class GrowthRate:
    """Bounded C^1 ice growth rate f_gr on [0, oo) with reported bounds.

    ``bound_value`` and ``bound_deriv`` are (estimates of) sup |f| and
    sup |f'|; both must be finite.
    """

    def __init__(self, fn, bound_value, bound_deriv, name="custom"):
        if not (np.isfinite(bound_value) and np.isfinite(bound_deriv)):
            raise ValueError("growth-rate bounds must be finite")
        self._fn = fn
        self.bound_value = float(bound_value)
        self.bound_deriv = float(bound_deriv)
        self.name = name

    def __call__(self, x):
        return self._fn(np.asarray(x, dtype=float))

    @property
    def at_zero(self):
        return float(self(0.0))

    @classmethod
    def constant(cls, c):
        return cls(lambda x: np.full_like(np.asarray(x, dtype=float), c), abs(c), 0.0, "constant")

    @classmethod
    def tanh_profile(cls, g0):
        """f(x) = g0 (1 - tanh x): bounded with bounded derivative."""
        return cls(lambda x: g0 * (1.0 - np.tanh(x)), abs(g0), abs(g0), "tanh")

    @classmethod
    def from_table(cls, xs, ys):
        """Piecewise-linear table with clamped extrapolation."""
        xs = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float)
        if xs.ndim != 1 or xs.shape != ys.shape or len(xs) < 2:
            raise ValueError("table needs matching 1-d abscissae/values, >= 2 points")
        if np.any(np.diff(xs) <= 0):
            raise ValueError("table abscissae must be strictly increasing")
        slopes = np.diff(ys) / np.diff(xs)
        return cls(
            lambda x: np.interp(x, xs, ys),
            float(np.abs(ys).max()),
            float(np.abs(slopes).max()),
            "table",
        )

    @classmethod
    def zero(cls):
        return cls.constant(0.0)


def source_h(h, a, f_gr):
    """Thickness source S_h = f_gr(h/a) a + (1 - a) f_gr(0)."""
    h = np.asarray(h, dtype=float)
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise ValueError("concentration must be positive (h/a undefined)")
    return f_gr(h / a) * a + (1.0 - a) * f_gr.at_zero


def source_a(h, a, f_gr, kappa):
    """Concentration source.

    First addend: (f_gr(0)/kappa)(1-a) when f_gr(0) > 0, else 0.
    Second addend: (a / 2h) S_h when S_h < 0, else 0.
    The boundary cases f_gr(0) = 0 and S_h = 0 contribute 0 (the continuous
    extension; both one-sided limits vanish there).
    """
    h = np.asarray(h, dtype=float)
    a = np.asarray(a, dtype=float)
    sh = source_h(h, a, f_gr)
    f0 = f_gr.at_zero
    growth = (f0 / kappa) * (1.0 - a) if f0 > 0 else np.zeros_like(a)
    melt = np.where(sh < 0, a / (2.0 * h) * sh, 0.0)
    return growth + melt
