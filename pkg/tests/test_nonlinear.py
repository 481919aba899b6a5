import numpy as np
import pytest

from hvpsim.errors import BlowupSignal, InvertibilityLost
from hvpsim.fields import ForcingFields, Grid, RheologyParams, StateField
from hvpsim.lagrangian import FlowMap
from hvpsim.nonlinear import (
    apply_transformed_hibler,
    assemble_rhs,
    build_flow_maps,
    dependence_experiment,
    picard_solve,
    strain_gradient,
    strain_gradient_expanded,
    transformed_div,
    transformed_residual,
    transformed_strain,
)
from hvpsim.norms import NormSuite
from hvpsim.operators import assemble_operator_matrix, div_h, grad_h, strain_of
from hvpsim.rheology import ice_strength, stress_sigma
from hvpsim.scenarios import adversarial_state, default_state, perturbation_profile
from hvpsim.thermo import GrowthRate, source_a, source_h

from conftest import smooth_state


def identity_grad_y(grid):
    return np.broadcast_to(np.eye(2), (grid.nx, grid.ny, 2, 2)).copy()


class TestTransformedStrain:
    def test_identity_map_reduces_to_plain_strain(self, grid):
        rng = np.random.default_rng(0)
        v = rng.normal(size=(grid.nx, grid.ny, 2))
        eps = transformed_strain(v, identity_grad_y(grid), grid)
        plain = strain_of(v, grid)
        assert np.array_equal(eps.e11, plain.e11)
        assert np.array_equal(eps.e12, plain.e12)
        assert np.array_equal(eps.e22, plain.e22)

    def test_zero_velocity(self, grid):
        eps = transformed_strain(np.zeros((grid.nx, grid.ny, 2)), identity_grad_y(grid), grid)
        assert np.abs(eps.e11).max() == 0.0

    def test_shear_flow_matches_composition_oracle(self, grid):
        # v_tilde = (y2, 0) under X = y + t (y2, 0): the composed Eulerian
        # field is v(x) = (x2, 0) with strain [[0, 1/2], [1/2, 0]], and the
        # chain-rule strain must reproduce it exactly (affine fields)
        t = 0.4
        v = np.zeros((grid.nx, grid.ny, 2))
        v[..., 0] = grid.Y
        gy = np.broadcast_to(np.array([[1.0, -t], [0.0, 1.0]]), (grid.nx, grid.ny, 2, 2))
        eps = transformed_strain(v, gy, grid)
        assert np.allclose(eps.e11, 0.0, atol=1e-13)
        assert np.allclose(eps.e12, 0.5, atol=1e-13)
        assert np.allclose(eps.e22, 0.0, atol=1e-13)


class TestTransformedHibler:
    def test_identity_flow_constant_state_gives_zero(self, grid, constant_state, params):
        out = apply_transformed_hibler(constant_state, FlowMap.identity(grid), params, grid)
        assert np.abs(out).max() < 1e-14

    def test_identity_flow_matches_direct_divergence(self, params):
        # two independent discretizations of the same operator; refinement study
        def err(n):
            g = Grid.unit_square(n)
            X, Y = g.X, g.Y
            v = np.stack(
                [
                    0.3 * Y + 0.05 * np.sin(np.pi * X) * np.sin(np.pi * Y),
                    0.1 * X + 0.05 * np.sin(np.pi * X) * np.sin(2 * np.pi * Y),
                ],
                axis=-1,
            )
            h = 1.0 + 0.2 * np.cos(np.pi * X) * np.cos(np.pi * Y)
            a = 0.9 + 0.05 * np.cos(np.pi * X)
            u = StateField(v, h, a)
            p = RheologyParams(delta=0.5)
            lhs = apply_transformed_hibler(u, FlowMap.identity(g), p, g)
            sig = stress_sigma(strain_of(v, g), h, a, p)
            P = ice_strength(h, a, p)
            s11, s12, s22 = sig.e11 + P / 2, sig.e12, sig.e22 + P / 2
            div1 = grad_h(s11, g)[..., 0] + grad_h(s12, g)[..., 1]
            div2 = grad_h(s12, g)[..., 0] + grad_h(s22, g)[..., 1]
            rhs = np.stack([div1, div2], axis=-1) / (p.rho_ice * h)[..., None]
            return np.abs(lhs - rhs).max()

        errs = [err(n) for n in (17, 33, 65)]
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert errs[0] > errs[1] > errs[2]
        assert np.all(orders > 1.6) and np.all(orders < 2.4)

    def test_strain_gradient_expansion_matches_direct(self):
        # four-term product-rule expansion against direct differencing
        def err(n):
            g = Grid.unit_square(n)
            X, Y = g.X, g.Y
            v = np.stack(
                [
                    0.3 * Y + 0.05 * np.sin(np.pi * X) * np.sin(np.pi * Y),
                    0.1 * X + 0.05 * np.sin(np.pi * X) * np.sin(2 * np.pi * Y),
                ],
                axis=-1,
            )
            disp = 0.05 * np.stack(
                [np.sin(np.pi * X) * np.cos(np.pi * Y), np.cos(np.pi * X) * np.sin(np.pi * Y)],
                axis=-1,
            )
            gy = FlowMap(g, disp, t=0.1).grad_y()
            eps = transformed_strain(v, gy, g)
            direct = strain_gradient(eps, g)
            expanded = strain_gradient_expanded(v, gy, g)
            return np.abs(direct - expanded).max()

        errs = [err(n) for n in (17, 33, 65)]
        orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
        assert np.all(orders > 1.6) and np.all(orders < 2.4)


class TestAssembleRhs:
    def test_initial_sweep_cancellation(self, grid, params):
        # u_hat = 0 at t = 0 with the identity flow: the divergence terms in
        # the thickness row cancel exactly, leaving omega h0 + S_h
        u0 = smooth_state(grid)
        omega = 1.3
        forcing = ForcingFields.quiescent(grid, f_gr=GrowthRate.tanh_profile(1e-3))
        op = assemble_operator_matrix(u0, params, grid, omega)
        zero = StateField.zeros(grid)
        f1, f2, f3 = assemble_rhs(
            zero, u0, u0, FlowMap.identity(grid), params, grid, forcing, 0.0, omega, op
        )
        want2 = omega * u0.h + source_h(u0.h, u0.a, forcing.f_gr)
        want3 = omega * u0.a + source_a(u0.h, u0.a, forcing.f_gr, params.kappa)
        assert np.allclose(f2, want2, atol=1e-13)
        assert np.allclose(f3, want3, atol=1e-13)

    def test_constant_rest_state_with_zero_shift(self, grid, params, constant_state):
        forcing = ForcingFields.quiescent(grid, f_gr=GrowthRate.tanh_profile(1e-3))
        p = RheologyParams(C_ocn=0.0)
        op = assemble_operator_matrix(constant_state, p, grid, 0.0)
        f1, f2, f3 = assemble_rhs(
            StateField.zeros(grid),
            constant_state,
            constant_state,
            FlowMap.identity(grid),
            p,
            grid,
            forcing,
            0.0,
            0.0,
            op,
        )
        assert np.abs(f1).max() < 1e-14
        assert np.allclose(f2, source_h(0.5, 0.5, forcing.f_gr), atol=1e-14)
        assert np.allclose(f3, source_a(0.5, 0.5, forcing.f_gr, p.kappa), atol=1e-14)

    def test_ocean_drag_term(self, grid, constant_state):
        p = RheologyParams(rho_ocn=2.0, C_ocn=0.3, c_cor=0.0)
        vo = np.array([0.2, -0.1])
        forcing = ForcingFields(grid, v_ocn=vo, f_gr=None)
        op = assemble_operator_matrix(constant_state, p, grid, 0.0)
        f1, _, _ = assemble_rhs(
            StateField.zeros(grid),
            constant_state,
            constant_state,
            FlowMap.identity(grid),
            p,
            grid,
            forcing,
            0.0,
            0.0,
            op,
        )
        want = 2.0 * 0.3 * np.linalg.norm(vo) * vo / (p.rho_ice * 0.5)
        assert np.allclose(f1, want[None, None, :], atol=1e-13)

    def test_blowup_signal_when_leaving_admissible_set(self, grid, params, constant_state):
        forcing = ForcingFields.quiescent(grid)
        op = assemble_operator_matrix(constant_state, params, grid, 1.0)
        bad_hat = StateField(
            np.zeros((grid.nx, grid.ny, 2)),
            np.zeros(grid.shape),
            np.full(grid.shape, 0.6),  # pushes a to 1.1
        )
        with pytest.raises(BlowupSignal):
            assemble_rhs(
                bad_hat,
                constant_state,
                constant_state,
                FlowMap.identity(grid),
                params,
                grid,
                forcing,
                0.3,
                1.0,
                op,
            )

    def test_transformed_div_equals_plain_at_identity(self, grid):
        rng = np.random.default_rng(1)
        v = rng.normal(size=(grid.nx, grid.ny, 2))
        td = transformed_div(v, identity_grad_y(grid), grid)
        assert np.array_equal(td, div_h(v, grid))

    def test_transformed_b_matches_coupling_block_at_identity(self, grid, params):
        # field evaluation at the frozen state along the identity map equals
        # the assembled coupling block on the interior rows
        from hvpsim.nonlinear import transformed_b

        u1 = smooth_state(grid)
        op = assemble_operator_matrix(u1, params, grid, 1.0)
        field = transformed_b(u1, identity_grad_y(grid), params, grid)
        mat = op.apply_b1(u1.h, u1.a)
        inner = (slice(1, -1), slice(1, -1))
        assert np.allclose(field[inner], mat[inner], atol=1e-15)


class TestPicard:
    def test_rest_state_zero_shift_immediate_fixed_point(self, grid, quiet_forcing, constant_state):
        p = RheologyParams(C_ocn=0.0)
        res = picard_solve(
            constant_state, p, grid, quiet_forcing, T=0.1, dt=0.01, omega=0.0
        )
        assert res.iterations <= 2
        states = res.trajectory.states()
        assert max(np.abs(s.v).max() for s in states) < 1e-14
        # with omega = 0 the homogeneous solve leaves constants untouched
        assert max(np.abs(s.h - 0.5).max() for s in states) < 1e-12
        assert max(np.abs(s.a - 0.5).max() for s in states) < 1e-12

    def test_deltas_strictly_decreasing_on_default_scenario(self, quiet_forcing):
        g = Grid.unit_square(12)
        forcing = ForcingFields.quiescent(g, f_gr=GrowthRate.tanh_profile(1e-4))
        res = picard_solve(default_state(g), RheologyParams(), g, forcing, T=0.05, dt=0.005)
        d = res.deltas
        assert all(d[i + 1] < d[i] for i in range(len(d) - 1))
        assert res.termination == "converged"

    def test_initial_state_matches_data(self, grid):
        forcing = ForcingFields.quiescent(grid, f_gr=None)
        u0 = smooth_state(grid)
        res = picard_solve(u0, RheologyParams(), grid, forcing, T=0.05, dt=0.005)
        s0 = res.trajectory.state(0)
        assert np.array_equal(s0.v, u0.v)
        assert np.array_equal(s0.h, u0.h)
        assert np.array_equal(s0.a, u0.a)

    def test_determinism(self, grid):
        forcing = ForcingFields.quiescent(grid, f_gr=GrowthRate.tanh_profile(1e-4))
        u0 = smooth_state(grid)
        r1 = picard_solve(u0, RheologyParams(), grid, forcing, T=0.05, dt=0.005)
        r2 = picard_solve(u0, RheologyParams(), grid, forcing, T=0.05, dt=0.005)
        assert len(r1.trajectory.xs) == len(r2.trajectory.xs)
        for x, y in zip(r1.trajectory.xs, r2.trajectory.xs):
            assert np.array_equal(x, y)

    def test_fixed_point_residual_small(self, grid):
        forcing = ForcingFields.quiescent(grid, f_gr=GrowthRate.tanh_profile(1e-4))
        u0 = smooth_state(grid)
        ns = NormSuite(grid)
        tol = 1e-8
        res = picard_solve(u0, RheologyParams(), grid, forcing, T=0.05, dt=0.005, tol=tol, norms=ns)
        resid = transformed_residual(res, u0, RheologyParams(), grid, forcing, ns)
        scale = max(1.0, ns.e1(res.trajectory.states(), res.dt))
        assert resid <= 10.0 * tol * scale

    def test_admissibility_along_accepted_run(self, grid):
        from hvpsim.fields import validate_state

        forcing = ForcingFields.quiescent(grid, f_gr=GrowthRate.tanh_profile(1e-4))
        params = RheologyParams()
        res = picard_solve(default_state(grid), params, grid, forcing, T=0.1, dt=0.005)
        for s in res.trajectory.states():
            assert validate_state(s, params).in_v

    def test_rejects_inadmissible_data(self, grid, quiet_forcing, params):
        bad = StateField(
            np.zeros((grid.nx, grid.ny, 2)),
            np.full(grid.shape, params.kappa / 2),
            np.full(grid.shape, 0.5),
        )
        with pytest.raises(ValueError):
            picard_solve(bad, params, grid, quiet_forcing, T=0.1, dt=0.01)

    def test_adversarial_velocity_aborts_after_halvings(self, quiet_forcing):
        g = Grid.unit_square(12)
        u0 = adversarial_state(g, amplitude=500.0)
        with pytest.raises(InvertibilityLost):
            picard_solve(
                u0,
                RheologyParams(),
                g,
                ForcingFields.quiescent(g),
                T=0.2,
                dt=0.005,
                omega=1.0,
                max_halvings=3,
            )

    def test_flow_maps_follow_velocity(self, grid):
        v = np.zeros((grid.nx, grid.ny, 2))
        v[..., 0] = 0.2
        maps = build_flow_maps([v, v, v], grid, 0.1)
        assert np.allclose(maps[2].disp[..., 0], 0.04, atol=1e-15)
        assert maps[2].t == pytest.approx(0.2)

    def test_trapezoidal_sweeps_converge(self, grid):
        forcing = ForcingFields.quiescent(grid, f_gr=GrowthRate.tanh_profile(1e-4))
        u0 = smooth_state(grid)
        be = picard_solve(u0, RheologyParams(), grid, forcing, T=0.05, dt=0.005)
        tr = picard_solve(
            u0, RheologyParams(), grid, forcing, T=0.05, dt=0.005, scheme="trapezoidal"
        )
        assert tr.termination == "converged"
        # both schemes approximate the same dynamics
        ns = NormSuite(grid)
        gap = ns.x0(tr.trajectory.final_state() - be.trajectory.final_state())
        assert gap < 0.05 * ns.x0(be.trajectory.final_state())

    def test_spatially_varying_forcing_is_composed_with_the_map(self, grid):
        # a wind field linear in position, sampled along a pure translation:
        # the drag term must see the shifted positions
        p = RheologyParams(rho_atm=1.0, C_atm=1.0, c_cor=0.0, C_ocn=0.0)
        s = 2 * grid.dx

        def wind(t):
            return np.stack([1.0 + grid.X, np.zeros(grid.shape)], axis=-1)

        forcing = ForcingFields(grid, v_atm=wind, f_gr=None)
        assert not forcing.spatially_constant
        u0 = StateField(
            np.zeros((grid.nx, grid.ny, 2)),
            np.full(grid.shape, 0.5),
            np.full(grid.shape, 0.5),
        )
        fmap = FlowMap(grid, np.broadcast_to([s, 0.0], (grid.nx, grid.ny, 2)).copy(), t=0.1)
        op = assemble_operator_matrix(u0, p, grid, 0.0)
        f1, _, _ = assemble_rhs(
            StateField.zeros(grid), u0, u0, fmap, p, grid, forcing, 0.1, 0.0, op
        )
        inside = grid.X + s <= grid.xs[-1] + 1e-12
        shifted = 1.0 + grid.X + s
        want = shifted**2 / (p.rho_ice * 0.5)
        assert np.allclose(f1[inside, 0], want[inside], rtol=1e-12)
        assert np.abs(f1[..., 1]).max() < 1e-13


class TestDependence:
    def test_zero_perturbation_is_exact(self, grid):
        forcing = ForcingFields.quiescent(grid, f_gr=None)
        u0 = smooth_state(grid)
        rows = dependence_experiment(
            u0,
            [0.0],
            perturbation_profile(grid),
            RheologyParams(),
            grid,
            forcing,
            T=0.05,
            dt=0.005,
        )
        assert rows[0]["diff_e1"] == 0.0
        assert rows[0]["rho"] == 0.0

    def test_ratios_finite_and_positive(self, grid):
        forcing = ForcingFields.quiescent(grid, f_gr=None)
        u0 = smooth_state(grid)
        rows = dependence_experiment(
            u0,
            [1e-2, 5e-3],
            perturbation_profile(grid),
            RheologyParams(),
            grid,
            forcing,
            T=0.05,
            dt=0.005,
            threads=2,
        )
        for r in rows:
            assert np.isfinite(r["rho"]) and r["rho"] > 0
