"""Named initial-data scenarios, resolution independent."""

from __future__ import annotations

import numpy as np

from .fields import StateField, enforce_dirichlet


def default_state(grid, amplitude=0.1):
    """Smooth well-inside-V data: h0 >= 2 kappa, a0 in [0.3, 0.7]."""
    px = np.pi * (grid.X - grid.x0) / grid.lx
    py = np.pi * (grid.Y - grid.y0) / grid.ly
    v = amplitude * np.stack(
        [np.sin(px) * np.sin(py), np.sin(2 * px) * np.sin(py)], axis=-1
    )
    h = 0.5 + 0.1 * np.cos(px) * np.cos(py)
    a = 0.5 + 0.2 * np.cos(px) * np.cos(py)
    return StateField(enforce_dirichlet(v, grid), h, a)


def constant_state(grid, h_bar=0.5, a_bar=0.5):
    """Spatially constant rest state."""
    return StateField(
        np.zeros((grid.nx, grid.ny, 2)),
        np.full((grid.nx, grid.ny), float(h_bar)),
        np.full((grid.nx, grid.ny), float(a_bar)),
    )


def adversarial_state(grid, amplitude=500.0):
    """Velocity violent enough that no admissible horizon halving survives."""
    return default_state(grid, amplitude=amplitude)


def perturbation_profile(grid):
    """Fixed smooth profile for continuous-dependence probes; Dirichlet-compatible."""
    px = np.pi * (grid.X - grid.x0) / grid.lx
    py = np.pi * (grid.Y - grid.y0) / grid.ly
    v = np.stack([np.sin(px) * np.sin(2 * py), -np.sin(2 * px) * np.sin(py)], axis=-1)
    h = np.cos(px) * np.cos(py)
    a = np.sin(px) * np.sin(py)
    return StateField(enforce_dirichlet(v, grid), h, a)


def build_scenario(name, grid, options=None):
    options = dict(options or {})
    if name == "default":
        return default_state(grid, amplitude=options.get("amplitude", 0.1))
    if name in ("constant", "zero-velocity"):
        return constant_state(
            grid, h_bar=options.get("h_bar", 0.5), a_bar=options.get("a_bar", 0.5)
        )
    if name == "adversarial":
        return adversarial_state(grid, amplitude=options.get("amplitude", 500.0))
    raise ValueError(f"unknown scenario {name!r}")
