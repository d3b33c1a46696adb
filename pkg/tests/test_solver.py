import numpy as np
import pytest

from dirichlet_p.assemble import solve_linear_dirichlet
from dirichlet_p.grid import (
    GridDomain,
    GridFunction,
    GridStructure,
    boundary_mask,
    unit_structure,
)
from dirichlet_p.pform import PFormContext
from dirichlet_p.solve import (
    SolveError,
    SolveOptions,
    harmonicity_residual,
    solve_dirichlet,
    solve_obstacle,
)
from conftest import random_elliptic_field


def _affine_boundary(domain, lin, const=0.0):
    mask = boundary_mask(domain)
    coords = domain.node_coords()
    vals = coords @ np.asarray(lin, dtype=float) + const
    return GridFunction(np.where(mask, vals, 0.0), mask), vals


class TestDirichlet:
    @pytest.mark.parametrize("p", [2.0, 2.5, 3.0, 4.0])
    def test_affine_data_reproduced_exactly(self, square, square_structure, p):
        ctx = PFormContext(square_structure, p)
        bc, exact = _affine_boundary(square, [1.5, -0.5], 0.25)
        res = solve_dirichlet(ctx, bc)
        assert res.residual_norm <= 1e-10
        assert np.max(np.abs(res.solution.values - exact)) <= 1e-12

    @pytest.mark.parametrize("p", [2.0, 3.0, 4.0])
    def test_1d_identity_profile(self, p):
        d = GridDomain(((0.0, 1.0),), (17,))
        ctx = PFormContext(unit_structure(d), p)
        x = d.node_coords()[..., 0]
        mask = boundary_mask(d)
        res = solve_dirichlet(ctx, GridFunction(np.where(mask, x, 0.0), mask))
        assert np.max(np.abs(res.solution.values - x)) <= 1e-12

    def test_p2_quadratic_harmonic_is_exact(self):
        # x^2 - y^2 lies in the kernel of the discrete operator, so the
        # p = 2 solve reproduces it to rounding (stronger than O(h^2))
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (17, 17))
        ctx = PFormContext(unit_structure(d), 2.0)
        mask = boundary_mask(d)
        c = d.node_coords()
        exact = c[..., 0] ** 2 - c[..., 1] ** 2
        res = solve_dirichlet(ctx, GridFunction(np.where(mask, exact, 0.0), mask))
        assert np.max(np.abs(res.solution.values - exact)) <= 1e-12

    def test_p2_quartic_harmonic_second_order(self):
        errs = {}
        for shape in (17, 33):
            d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (shape, shape))
            ctx = PFormContext(unit_structure(d), 2.0)
            mask = boundary_mask(d)
            c = d.node_coords()
            exact = c[..., 0] ** 4 - 6 * c[..., 0] ** 2 * c[..., 1] ** 2 + c[..., 1] ** 4
            res = solve_dirichlet(ctx, GridFunction(np.where(mask, exact, 0.0), mask),
                                  SolveOptions(grad_tol=1e-11))
            errs[shape] = float(np.max(np.abs(res.solution.values - exact)))
        order = np.log2(errs[17] / errs[33])
        assert order >= 1.9

    def test_maximum_principle(self, rng):
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (13, 13))
        s = GridStructure(d, random_elliptic_field(d, rng))
        mask = boundary_mask(d)
        for p in (2.0, 3.0):
            ctx = PFormContext(s, p)
            g = rng.standard_normal(d.node_shape)
            bc = GridFunction(np.where(mask, g, 0.0), mask)
            res = solve_dirichlet(ctx, bc, SolveOptions(grad_tol=1e-9))
            lo, hi = g[mask].min(), g[mask].max()
            pad = 1e-6 * (hi - lo)
            assert res.solution.values.min() >= lo - pad
            assert res.solution.values.max() <= hi + pad

    def test_uniqueness_across_initial_guesses(self, rng):
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (13, 13))
        ctx = PFormContext(unit_structure(d), 3.0)
        mask = boundary_mask(d)
        g = rng.standard_normal(d.node_shape)
        bc = GridFunction(np.where(mask, g, 0.0), mask)
        opts = SolveOptions(grad_tol=1e-10)
        r1 = solve_dirichlet(ctx, bc, opts)
        warm = GridFunction(rng.standard_normal(d.node_shape))
        r2 = solve_dirichlet(ctx, bc, opts, initial=warm)
        assert np.max(np.abs(r1.solution.values - r2.solution.values)) <= 10 * opts.grad_tol

    def test_energy_trace_nonincreasing(self, rng):
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (17, 17))
        ctx = PFormContext(unit_structure(d), 4.0)
        mask = boundary_mask(d)
        g = np.sin(5 * d.node_coords()[..., 0]) * np.cos(3 * d.node_coords()[..., 1])
        res = solve_dirichlet(ctx, GridFunction(np.where(mask, g, 0.0), mask))
        trace = res.energy_trace
        assert all(a >= b - 1e-12 * abs(a) for a, b in zip(trace, trace[1:]))

    def test_nonconvergence_raises_with_trace(self, rng):
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (17, 17))
        ctx = PFormContext(unit_structure(d), 4.0)
        mask = boundary_mask(d)
        g = np.sin(7 * d.node_coords()[..., 0]) * np.cos(5 * d.node_coords()[..., 1])
        with pytest.raises(SolveError) as err:
            solve_dirichlet(ctx, GridFunction(np.where(mask, g, 0.0), mask),
                            SolveOptions(grad_tol=1e-13, max_iter=1))
        assert err.value.trace

    def test_requires_boundary_mask(self, square, square_structure):
        ctx = PFormContext(square_structure, 2.0)
        with pytest.raises(ValueError):
            solve_dirichlet(ctx, GridFunction(np.zeros(square.node_shape)))

    @pytest.mark.parametrize("method", ["lbfgs", "gradient_armijo"])
    def test_alternative_methods_agree_with_newton(self, method, rng):
        d = GridDomain(((0.0, 1.0),), (17,))
        ctx = PFormContext(unit_structure(d), 3.0)
        mask = boundary_mask(d)
        g = np.where(mask, d.node_coords()[..., 0] ** 2, 0.0)
        bc = GridFunction(g, mask)
        newton = solve_dirichlet(ctx, bc, SolveOptions(grad_tol=1e-9))
        opts = SolveOptions(method=method, grad_tol=1e-7, max_iter=4000)
        other = solve_dirichlet(ctx, bc, opts)
        assert np.max(np.abs(newton.solution.values - other.solution.values)) <= 1e-5

    def test_p2_matches_direct_linear_solve(self, rng):
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (33, 33))
        s = GridStructure(d, random_elliptic_field(d, rng))
        ctx = PFormContext(s, 2.0)
        mask = boundary_mask(d)
        g = rng.standard_normal(d.node_shape)
        bc = GridFunction(np.where(mask, g, 0.0), mask)
        res = solve_dirichlet(ctx, bc)
        direct = solve_linear_dirichlet(s, np.where(mask, g, 0.0), mask)
        assert np.max(np.abs(res.solution.values - direct)) <= 1e-8


class TestObstacle:
    def test_inactive_obstacle_reduces_to_dirichlet(self, rng):
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (13, 13))
        ctx = PFormContext(unit_structure(d), 2.0)
        mask = boundary_mask(d)
        g = rng.standard_normal(d.node_shape)
        bc = GridFunction(np.where(mask, g, 0.0), mask)
        unconstrained = solve_dirichlet(ctx, bc)
        lower = GridFunction(np.full(d.node_shape, -np.inf))
        res = solve_obstacle(ctx, lower, bc)
        assert np.max(np.abs(res.solution.values - unconstrained.solution.values)) <= 1e-7
        assert res.diagnostics["active_nodes"] == 0

    def test_constant_plate(self, square, square_structure):
        ctx = PFormContext(square_structure, 3.0)
        mask = boundary_mask(square)
        bc = GridFunction(np.where(mask, 1.0, 0.0), mask)
        lower = GridFunction(np.ones(square.node_shape))
        res = solve_obstacle(ctx, lower, bc)
        assert np.allclose(res.solution.values, 1.0)
        assert res.residual_norm <= 1e-9

    def test_1d_condenser_closed_form(self):
        d = GridDomain(((0.0, 1.0),), (17,))
        ctx = PFormContext(unit_structure(d), 2.0)
        x = d.node_coords()[..., 0]
        mask = boundary_mask(d)
        lower = np.where((x >= 0.25) & (x <= 0.75), 1.0, -np.inf)
        res = solve_obstacle(ctx, GridFunction(lower),
                             GridFunction(np.zeros(d.node_shape), mask))
        exact = np.minimum(np.minimum(4 * x, 1.0), 4 * (1 - x))
        assert np.max(np.abs(res.solution.values - exact)) <= 1e-10
        assert res.diagnostics["complementarity_violation"] <= 1e-8
        assert res.diagnostics["vi_residual"] <= 1e-8

    def test_complementarity_fields(self, rng):
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (17, 17))
        ctx = PFormContext(unit_structure(d), 2.0)
        mask = boundary_mask(d)
        c = d.node_coords()
        bump = 0.5 - 2.0 * ((c[..., 0] - 0.5) ** 2 + (c[..., 1] - 0.5) ** 2)
        res = solve_obstacle(ctx, GridFunction(bump),
                             GridFunction(np.zeros(d.node_shape), mask))
        assert np.all(res.solution.values >= bump - 1e-10)
        assert res.diagnostics["active_nodes"] > 0
        assert res.diagnostics["complementarity_product"] <= 1e-6
        assert res.diagnostics["vi_residual"] <= 1e-7

    def test_infeasible_rejected(self, square, square_structure):
        ctx = PFormContext(square_structure, 2.0)
        mask = boundary_mask(square)
        bc = GridFunction(np.zeros(square.node_shape), mask)
        lower = GridFunction(np.ones(square.node_shape))  # above the boundary data
        with pytest.raises(ValueError, match="infeasible"):
            solve_obstacle(ctx, lower, bc)


class TestHarmonicityResidual:
    def test_affine_machine_zero(self, square, square_structure):
        ctx = PFormContext(square_structure, 3.0)
        u = GridFunction.from_callable(square, lambda x, y: 2 * x - y)
        region = np.ones(square.node_shape, dtype=bool)
        assert harmonicity_residual(u, region, ctx) <= 1e-12

    def test_solver_output_satisfies_tolerance(self, rng):
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (13, 13))
        ctx = PFormContext(unit_structure(d), 3.0)
        mask = boundary_mask(d)
        g = rng.standard_normal(d.node_shape)
        opts = SolveOptions(grad_tol=1e-9)
        res = solve_dirichlet(ctx, GridFunction(np.where(mask, g, 0.0), mask), opts)
        region = np.ones(d.node_shape, dtype=bool)
        assert harmonicity_residual(res.solution, region, ctx) <= opts.grad_tol

    def test_kink_detected(self):
        d = GridDomain(((-1.0, 1.0),), (17,))
        ctx = PFormContext(unit_structure(d), 2.0)
        u = GridFunction.from_callable(d, lambda x: np.abs(x))
        region = np.ones(d.node_shape, dtype=bool)
        assert harmonicity_residual(u, region, ctx) > 1.0

    def test_empty_region_rejected(self, square, square_structure):
        ctx = PFormContext(square_structure, 2.0)
        u = GridFunction.constant(square, 0.0)
        with pytest.raises(ValueError, match="interior"):
            harmonicity_residual(u, np.zeros(square.node_shape, dtype=bool), ctx)
