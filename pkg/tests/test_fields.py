import numpy as np
import pytest

from hvpsim.errors import CorruptFieldError
from hvpsim.fields import (
    Grid,
    RheologyParams,
    StateField,
    bilinear_sample,
    enforce_dirichlet,
    load_snapshot,
    save_snapshot,
    validate_state,
)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid(3, 8, 0.1, 0.1)
    with pytest.raises(ValueError):
        Grid(8, 8, -0.1, 0.1)
    with pytest.raises(ValueError):
        Grid(8, 8, 0.1, 0.0)


def test_boundary_mask_is_outer_ring():
    g = Grid(5, 7, 0.1, 0.1)
    m = g.boundary_mask
    assert m[0, :].all() and m[-1, :].all() and m[:, 0].all() and m[:, -1].all()
    assert not m[1:-1, 1:-1].any()
    assert m.sum() == 2 * 5 + 2 * 7 - 4


def test_params_validation():
    with pytest.raises(ValueError):
        RheologyParams(e=1.0)
    with pytest.raises(ValueError):
        RheologyParams(delta=0.0)
    with pytest.raises(ValueError):
        RheologyParams(kappa=-1.0)
    with pytest.raises(ValueError):
        RheologyParams(rho_ice=0.0)


def test_rotation_matrices_proper(params):
    for R in (params.R_atm, params.R_ocn):
        assert np.allclose(R.T @ R, np.eye(2), atol=1e-12)
        assert abs(np.linalg.det(R) - 1.0) < 1e-12
    tilted = RheologyParams(theta_ocn=0.3)
    R = tilted.R_ocn
    assert np.allclose(R.T @ R, np.eye(2), atol=1e-12)
    assert abs(np.linalg.det(R) - 1.0) < 1e-12


class TestValidateState:
    def test_comfortably_inside(self, grid, params):
        u = StateField(
            np.zeros((grid.nx, grid.ny, 2)),
            np.full(grid.shape, 2 * params.kappa),
            np.full(grid.shape, 0.5),
        )
        rep = validate_state(u, params)
        assert rep.in_v
        assert rep.margin_h == pytest.approx(params.kappa)

    def test_thickness_exactly_at_floor_is_outside(self, grid, params):
        u = StateField(
            np.zeros((grid.nx, grid.ny, 2)),
            np.full(grid.shape, params.kappa),
            np.full(grid.shape, 0.5),
        )
        assert not validate_state(u, params).in_v

    def test_full_concentration_at_one_node_is_outside(self, grid, params):
        a = np.full(grid.shape, 0.5)
        a[3, 4] = 1.0
        u = StateField(np.zeros((grid.nx, grid.ny, 2)), np.full(grid.shape, 1.0), a)
        assert not validate_state(u, params).in_v

    def test_nonfinite_is_hard_error(self, grid, params):
        h = np.full(grid.shape, 1.0)
        h[0, 0] = np.nan
        u = StateField(np.zeros((grid.nx, grid.ny, 2)), h, np.full(grid.shape, 0.5))
        with pytest.raises(CorruptFieldError):
            validate_state(u, params)

    def test_monotone_in_thickness(self, grid, params):
        rng = np.random.default_rng(7)
        for _ in range(50):
            h = params.kappa + rng.uniform(0.01, 1.0, grid.shape)
            a = rng.uniform(0.05, 0.95, grid.shape)
            u = StateField(np.zeros((grid.nx, grid.ny, 2)), h, a)
            assert validate_state(u, params).in_v
            bumped = StateField(u.v, h + rng.uniform(0, 1.0, grid.shape), a)
            assert validate_state(bumped, params).in_v


class TestEnforceDirichlet:
    def test_constant_field(self, grid):
        v = np.ones((grid.nx, grid.ny, 2))
        out = enforce_dirichlet(v, grid)
        assert (out[1:-1, 1:-1] == 1.0).all()
        assert (out[grid.boundary_mask] == 0.0).all()

    def test_zero_is_fixed_point(self, grid):
        v = np.zeros((grid.nx, grid.ny, 2))
        assert (enforce_dirichlet(v, grid) == 0).all()

    def test_boundary_sup_vanishes(self, grid):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(grid.nx, grid.ny, 2))
        out = enforce_dirichlet(v, grid)
        assert np.abs(out[grid.boundary_mask]).max() == 0.0

    def test_idempotent(self, grid):
        rng = np.random.default_rng(2)
        v = rng.normal(size=(grid.nx, grid.ny, 2))
        once = enforce_dirichlet(v, grid)
        assert np.array_equal(enforce_dirichlet(once, grid), once)


class TestSnapshots:
    def test_roundtrip_bit_exact(self, grid, tmp_path):
        rng = np.random.default_rng(3)
        u = StateField(
            rng.normal(size=(grid.nx, grid.ny, 2)),
            rng.normal(size=grid.shape),
            rng.normal(size=grid.shape),
        )
        path = tmp_path / "state.hvpf"
        save_snapshot(path, grid, u)
        nx, ny, comps = load_snapshot(path)
        assert (nx, ny) == grid.shape
        assert len(comps) == 4
        assert np.array_equal(comps[0], u.v[..., 0])
        assert np.array_equal(comps[1], u.v[..., 1])
        assert np.array_equal(comps[2], u.h)
        assert np.array_equal(comps[3], u.a)

    def test_rejects_foreign_file(self, grid, tmp_path):
        path = tmp_path / "junk.hvpf"
        path.write_bytes(b"NOPE" + bytes(40))
        with pytest.raises(ValueError):
            load_snapshot(path)

    def test_header_layout(self, grid, tmp_path):
        path = tmp_path / "h.hvpf"
        save_snapshot(path, grid, [np.zeros(grid.shape)])
        raw = path.read_bytes()
        assert raw[:4] == b"HVPF"
        assert int.from_bytes(raw[4:6], "little") == 1
        assert int.from_bytes(raw[6:10], "little") == grid.nx
        assert int.from_bytes(raw[10:14], "little") == grid.ny
        assert int.from_bytes(raw[14:18], "little") == 1
        assert len(raw) == 24 + grid.nx * grid.ny * 8


class TestBilinearSample:
    def test_exact_on_affine(self, grid):
        f = 2.0 + 3.0 * grid.X - 1.5 * grid.Y
        rng = np.random.default_rng(4)
        pts = rng.uniform(0.05, 0.95, size=(40, 2))
        vals = bilinear_sample(f, grid, pts)
        assert np.allclose(vals, 2.0 + 3.0 * pts[:, 0] - 1.5 * pts[:, 1], atol=1e-13)

    def test_clamps_outside_points(self, grid):
        f = grid.X.copy()
        vals = bilinear_sample(f, grid, np.array([[-1.0, 0.5], [2.0, 0.5]]))
        assert vals[0] == pytest.approx(0.0)
        assert vals[1] == pytest.approx(1.0)

    def test_vector_fields_carry_components(self, grid):
        f = np.stack([grid.X, grid.Y], axis=-1)
        pts = np.array([[0.25, 0.75]])
        assert np.allclose(bilinear_sample(f, grid, pts), [[0.25, 0.75]], atol=1e-14)
