import numpy as np
import pytest

from hvpsim.errors import InvertibilityLost
from hvpsim.fields import Grid
from hvpsim.lagrangian import (
    FlowMap,
    advance_flow_map,
    compose_with_map,
    inverse_gradient,
    inverse_positions,
    invertibility_check,
)


def shear_map(grid, t):
    """Flow of v = (y2, 0): X = y + t (y2, 0)."""
    disp = np.zeros((grid.nx, grid.ny, 2))
    disp[..., 0] = t * grid.Y
    return FlowMap(grid, disp, t=t)


class TestAdvance:
    def test_rest_velocity_keeps_identity(self, grid):
        m = FlowMap.identity(grid)
        zero = np.zeros((grid.nx, grid.ny, 2))
        for _ in range(5):
            m = advance_flow_map(m, zero, zero, 0.1)
        assert np.abs(m.disp).max() == 0.0
        assert np.allclose(m.grad_x[..., 0, 0], 1.0) and np.allclose(m.grad_x[..., 0, 1], 0.0)

    def test_steady_velocity_is_exact(self, grid):
        rng = np.random.default_rng(0)
        coef = rng.normal(size=6)
        w = np.stack(
            [
                coef[0] + coef[1] * grid.X + coef[2] * grid.Y,
                coef[3] + coef[4] * grid.X + coef[5] * grid.Y,
            ],
            axis=-1,
        )
        m = FlowMap.identity(grid)
        for _ in range(4):
            m = advance_flow_map(m, w, w, 0.05)
        t = 0.2
        assert np.allclose(m.disp, t * w, atol=1e-14)
        want = np.eye(2) + t * np.array([[coef[1], coef[2]], [coef[4], coef[5]]])
        assert np.allclose(m.grad_x, want, atol=1e-12)

    def test_linear_shear(self, grid):
        v = np.zeros((grid.nx, grid.ny, 2))
        v[..., 0] = grid.Y
        m = advance_flow_map(FlowMap.identity(grid), v, v, 0.3)
        assert np.allclose(m.grad_x, [[1.0, 0.3], [0.0, 1.0]], atol=1e-13)

    def test_step_splitting_exact_for_steady_velocity(self, grid):
        rng = np.random.default_rng(1)
        w = rng.normal(size=(grid.nx, grid.ny, 2))
        one = advance_flow_map(FlowMap.identity(grid), w, w, 0.2)
        two = advance_flow_map(
            advance_flow_map(FlowMap.identity(grid), w, w, 0.1), w, w, 0.1
        )
        assert np.abs(one.disp - two.disp).max() < 1e-14

    def test_rejects_nonpositive_step(self, grid):
        with pytest.raises(ValueError):
            advance_flow_map(FlowMap.identity(grid), None, None, 0.0)


class TestInverseGradient:
    def test_identity(self):
        g = np.broadcast_to(np.eye(2), (4, 4, 2, 2)).copy()
        assert np.allclose(inverse_gradient(g), g)

    def test_unimodular_shear(self):
        t = 0.4
        g = np.broadcast_to(np.array([[1.0, t], [0.0, 1.0]]), (3, 3, 2, 2)).copy()
        inv = inverse_gradient(g)
        assert np.allclose(inv, [[1.0, -t], [0.0, 1.0]], atol=1e-15)

    def test_diagonal(self):
        g = np.broadcast_to(np.diag([2.0, 0.5]), (3, 3, 2, 2)).copy()
        assert np.allclose(inverse_gradient(g), np.diag([0.5, 2.0]))

    def test_product_is_identity(self, grid):
        m = shear_map(grid, 0.35)
        gy = m.grad_y()
        prod = np.einsum("...ab,...bc->...ac", gy, m.grad_x)
        assert np.abs(prod - np.eye(2)).max() < 1e-10

    def test_floor_violation_carries_node(self):
        g = np.broadcast_to(np.eye(2), (5, 5, 2, 2)).copy()
        g[2, 3] = [[0.1, 0.0], [0.0, 1.0]]
        with pytest.raises(InvertibilityLost) as err:
            inverse_gradient(g, det_floor=0.25, time=1.5)
        assert err.value.node == (2, 3)
        assert err.value.time == 1.5


class TestInvertibilityCheck:
    def test_identity_map(self, grid):
        rep = invertibility_check(FlowMap.identity(grid))
        assert rep.sup_dev == 0.0
        assert rep.flag
        assert rep.min_det == pytest.approx(1.0)
        assert rep.sup_dev_inv == pytest.approx(0.0, abs=1e-14)

    def test_shear_above_threshold(self, grid):
        rep = invertibility_check(shear_map(grid, 0.6))
        assert rep.sup_dev == pytest.approx(0.6, abs=1e-12)
        assert not rep.flag

    def test_stretch_below_threshold(self, grid):
        disp = np.zeros((grid.nx, grid.ny, 2))
        disp[..., 0] = 0.4 * grid.X
        rep = invertibility_check(FlowMap(grid, disp))
        assert rep.sup_dev == pytest.approx(0.4, abs=1e-12)
        assert rep.flag

    def test_flag_monotone_under_displacement_scaling(self, grid):
        rng = np.random.default_rng(3)
        c = rng.normal(size=4)
        disp = 0.03 * np.stack(
            [
                c[0] * np.sin(np.pi * grid.X) + c[1] * np.cos(np.pi * grid.Y),
                c[2] * np.sin(2 * np.pi * grid.X) + c[3] * grid.Y,
            ],
            axis=-1,
        )
        base = FlowMap(grid, disp)
        assert invertibility_check(base).flag
        sups = [
            invertibility_check(FlowMap(grid, s * disp)).sup_dev
            for s in np.linspace(0, 1, 6)
        ]
        assert all(sups[i] <= sups[i + 1] + 1e-15 for i in range(5))
        assert all(
            invertibility_check(FlowMap(grid, s * disp)).flag for s in np.linspace(0, 1, 6)
        )


class TestCompose:
    def test_identity_map_exact_at_nodes(self, grid):
        rng = np.random.default_rng(4)
        f = rng.normal(size=grid.shape)
        out = compose_with_map(f, FlowMap.identity(grid), "forward")
        assert np.allclose(out, f, atol=1e-14)

    def test_constant_field_invariant(self, grid):
        f = np.full(grid.shape, 3.25)
        m = shear_map(grid, 0.2)
        assert np.allclose(compose_with_map(f, m, "forward"), 3.25)
        assert np.allclose(compose_with_map(f, m, "inverse"), 3.25)

    def test_linear_field_under_shift(self, grid):
        s = 0.13
        m = FlowMap(grid, np.broadcast_to([s, 0.0], (grid.nx, grid.ny, 2)).copy())
        f = grid.X.copy()
        out = compose_with_map(f, m, "forward")
        # clamped outside the domain on the right edge
        inside = grid.X + s <= grid.xs[-1] + 1e-12
        assert np.allclose(out[inside], (grid.X + s)[inside], atol=1e-13)

    def test_inverse_requires_health(self, grid):
        with pytest.raises(InvertibilityLost):
            compose_with_map(grid.X.copy(), shear_map(grid, 0.8), "inverse")

    def test_inverse_positions_solve_forward_map(self, grid):
        m = shear_map(grid, 0.3)
        y = inverse_positions(m)
        forward = y + np.stack([0.3 * y[..., 1], np.zeros(grid.shape)], axis=-1)
        pts = grid.positions()
        interior = (slice(1, -1), slice(1, -1))
        assert np.abs((forward - pts)[interior]).max() < 1e-10 * grid.dx

    def test_unknown_direction(self, grid):
        with pytest.raises(ValueError):
            compose_with_map(grid.X.copy(), FlowMap.identity(grid), "sideways")
