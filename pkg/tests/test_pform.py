import math

import numpy as np
import pytest
import scipy.linalg

from dirichlet_p.assemble import mass_matrix, stiffness_matrix
from dirichlet_p.capacity import Condenser, capacity, nodes_in_box
from dirichlet_p.grid import (
    GridDomain,
    GridFunction,
    GridStructure,
    boundary_mask,
    energy,
    gamma,
    unit_structure,
)
from dirichlet_p.pform import (
    PFormContext,
    PurePotentialError,
    check_coercive,
    check_contraction_operates,
    check_dirichlet_axioms,
    check_hemicontinuous,
    check_monotone,
    check_sector,
    estimate_poincare,
    p_energy,
    p_form,
    p_operator,
    pure_potential_violation,
)
from dirichlet_p.solve import SolveOptions
from conftest import random_elliptic_field, random_function


class TestContextValidation:
    def test_rejects_small_p(self, square_structure):
        with pytest.raises(ValueError):
            PFormContext(square_structure, 1.0)

    def test_rejects_unregularized_below_two(self, square_structure):
        with pytest.raises(ValueError):
            PFormContext(square_structure, 1.5)
        ctx = PFormContext(square_structure, 1.5, eps=1e-12)
        assert ctx.eps == 1e-12

    def test_rejects_negative_eps(self, square_structure):
        with pytest.raises(ValueError):
            PFormContext(square_structure, 3.0, eps=-1.0)


class TestPForm:
    def test_p2_reduces_to_twice_energy(self, square, rng):
        s = GridStructure(square, random_elliptic_field(square, rng))
        ctx = PFormContext(s, 2.0)
        for _ in range(20):
            u = random_function(square, rng)
            v = random_function(square, rng)
            lhs = p_form(u, v, ctx)
            rhs = 2.0 * energy(u, v, s)
            assert abs(lhs - rhs) <= 1e-12 * max(abs(rhs), 1.0)

    def test_single_cell_p4_value(self):
        d = GridDomain(((0.0, 1.0),), (5,))
        s = unit_structure(d)
        u = GridFunction.from_callable(d, lambda x: x)
        ctx = PFormContext(s, 4.0)
        assert np.isclose(p_form(u, u, ctx), 4.0)
        assert np.isclose(p_energy(u, ctx), 1.0)

    def test_diagonal_matches_gamma_norm(self, square, rng):
        s = GridStructure(square, random_elliptic_field(square, rng))
        for p in (2.0, 2.5, 3.0, 4.0):
            ctx = PFormContext(s, p)
            u = random_function(square, rng)
            direct = float(np.sum(gamma(u, s) ** (p / 2.0) * s.measure))
            assert np.isclose(p_form(u, u, ctx), direct, rtol=1e-12)

    def test_homogeneity_degree_p_minus_one(self, square, rng):
        s = GridStructure(square, random_elliptic_field(square, rng))
        for p in (2.0, 2.5, 3.0, 4.0):
            ctx = PFormContext(s, p)
            u = random_function(square, rng)
            v = random_function(square, rng)
            base = p_form(u, v, ctx)
            for t in (0.25, 1.0, 3.5):
                lhs = p_form(GridFunction(t * u.values), v, ctx)
                assert abs(lhs - t ** (p - 1.0) * base) <= 1e-12 * max(abs(base), 1.0) * t ** (p - 1)

    def test_energy_homogeneity_degree_p(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = random_function(square, rng)
        base = p_energy(u, ctx)
        for t in (0.5, 2.0):
            assert np.isclose(p_energy(GridFunction(t * u.values), ctx),
                              t ** 3 * base, rtol=1e-12)

    def test_constant_has_zero_energy(self, square, square_structure):
        ctx = PFormContext(square_structure, 3.0)
        assert p_energy(GridFunction.constant(square, 5.0), ctx) == 0.0


class TestOperator:
    def test_pairing_identity_machine_precision(self, square, rng):
        s = GridStructure(square, random_elliptic_field(square, rng))
        mask = boundary_mask(square)
        for p in (2.0, 3.0, 4.0):
            ctx = PFormContext(s, p)
            u = random_function(square, rng)
            F = p_operator(u, ctx, mask=mask)
            for _ in range(5):
                v = random_function(square, rng)
                v.values[mask] = 0.0
                direct = p_form(u, GridFunction(v.values), ctx)
                assert abs(F.pair(v) - direct) <= 1e-12 * max(abs(direct), 1.0)

    def test_constant_gives_zero_functional(self, square, square_structure):
        ctx = PFormContext(square_structure, 3.0)
        F = p_operator(GridFunction.constant(square, 2.0), ctx)
        assert np.all(F.coefficients == 0.0)

    def test_operator_homogeneity(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = random_function(square, rng)
        F1 = p_operator(u, ctx).coefficients
        F2 = p_operator(GridFunction(2.0 * u.values), ctx).coefficients
        assert np.allclose(F2, 2.0 ** 2 * F1, rtol=1e-12)

    def test_euler_identity(self, square, square_structure, rng):
        for p in (2.0, 2.5, 4.0):
            ctx = PFormContext(square_structure, p)
            u = random_function(square, rng)
            F = p_operator(u, ctx)
            assert np.isclose(F.pair(u), p * p_energy(u, ctx), rtol=1e-11)

    def test_p2_matches_assembled_stiffness_entrywise(self, rng):
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (8, 8))
        s = GridStructure(d, random_elliptic_field(d, rng))
        ctx = PFormContext(s, 2.0)
        S = stiffness_matrix(s).toarray()
        n = d.num_nodes
        cols = np.zeros((n, n))
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            cols[:, j] = p_operator(GridFunction(e.reshape(d.node_shape)), ctx).coefficients.reshape(-1)
        assert np.max(np.abs(cols - S)) <= 1e-10 * max(np.max(np.abs(S)), 1.0)

    def test_gradient_consistency_central_difference(self, square, rng):
        s = GridStructure(square, random_elliptic_field(square, rng))
        delta = 1e-4
        for p in (2.0, 3.0, 4.0):
            ctx = PFormContext(s, p)
            u = random_function(square, rng, smooth=True)
            v = random_function(square, rng, smooth=True)
            plus = p_energy(GridFunction(u.values + delta * v.values), ctx)
            minus = p_energy(GridFunction(u.values - delta * v.values), ctx)
            cd = (plus - minus) / (2.0 * delta)
            assert abs(cd - p_form(u, v, ctx)) <= 1e-6


class TestSector:
    def test_equality_at_diagonal(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = random_function(square, rng)
        rep = check_sector(u, u, ctx)
        assert rep.passed and abs(rep.slack) <= 1e-9 * max(rep.rhs, 1.0)
        rep_neg = check_sector(u, GridFunction(-u.values), ctx)
        assert rep_neg.passed and abs(rep_neg.slack) <= 1e-9 * max(rep_neg.rhs, 1.0)

    def test_random_sweep(self, rng):
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (8, 8))
        s = unit_structure(d)
        for p in (2.5, 3.0, 4.0):
            ctx = PFormContext(s, p)
            for _ in range(200):
                u = random_function(d, rng)
                v = random_function(d, rng)
                rep = check_sector(u, v, ctx)
                assert rep.passed and rep.slack >= -rep.tolerance


class TestMonotone:
    def test_identical_inputs(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = random_function(square, rng)
        rep = check_monotone(u, u, ctx)
        assert rep.passed
        assert rep.details["pairing"] == 0.0
        assert rep.details["gamma_difference_max"] == 0.0

    def test_constant_shift(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = random_function(square, rng)
        v = GridFunction(u.values + 4.0)
        rep = check_monotone(u, v, ctx)
        assert rep.passed
        assert abs(rep.details["pairing"]) <= 1e-9
        assert rep.details["gamma_difference_max"] <= 1e-18

    def test_random_sweep_per_cell(self, square, rng):
        s = GridStructure(square, random_elliptic_field(square, rng))
        ctx = PFormContext(s, 3.0)
        for _ in range(100):
            u = random_function(square, rng)
            v = random_function(square, rng)
            rep = check_monotone(u, v, ctx)
            assert rep.passed
            assert rep.details["min_cell_value"] >= -rep.tolerance


class TestPoincare:
    def test_dense_eigensolver_oracle_1d(self):
        d = GridDomain(((0.0, 1.0),), (5,))  # h = 0.25, 3 interior nodes
        s = unit_structure(d)
        mask = boundary_mask(d)
        k = estimate_poincare(s, mask)
        free = ~mask.reshape(-1)
        S = stiffness_matrix(s).toarray()[np.ix_(free, free)]
        M = mass_matrix(d).toarray()[np.ix_(free, free)]
        expected = float(np.max(scipy.linalg.eigvalsh(M, S)))
        assert np.isclose(k, expected, rtol=1e-8)

    def test_dense_eigensolver_oracle_2d(self, rng):
        d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (7, 7))
        s = GridStructure(d, random_elliptic_field(d, rng))
        mask = boundary_mask(d)
        k = estimate_poincare(s, mask)
        free = ~mask.reshape(-1)
        S = stiffness_matrix(s).toarray()[np.ix_(free, free)]
        M = mass_matrix(d).toarray()[np.ix_(free, free)]
        expected = float(np.max(scipy.linalg.eigvalsh(M, S)))
        assert np.isclose(k, expected, rtol=1e-7)

    def test_refinement_approaches_continuum_monotonically(self):
        # the unit interval with pinned ends and unit coefficient has the
        # continuum constant 1/(2 pi^2) for the full carre du champ pairing
        target = 1.0 / (2.0 * math.pi ** 2)
        ks = []
        for shape in (17, 65, 257):
            d = GridDomain(((0.0, 1.0),), (shape,))
            ks.append(estimate_poincare(unit_structure(d), boundary_mask(d)))
        assert ks[0] < ks[1] < ks[2] < target
        assert abs(ks[-1] - target) <= 1e-3

    def test_measure_scaling_invariance(self):
        d = GridDomain(((0.0, 1.0),), (17,))
        d_scaled = GridDomain(((0.0, 1.0),), (17,), np.full((16,), 5.0))
        k1 = estimate_poincare(unit_structure(d), boundary_mask(d))
        k2 = estimate_poincare(unit_structure(d_scaled), boundary_mask(d_scaled))
        assert np.isclose(k1, k2, rtol=1e-7)

    def test_empty_mask_rejected(self, line_structure, line):
        with pytest.raises(ValueError):
            estimate_poincare(line_structure, np.zeros(line.node_shape, dtype=bool))


class TestCoercive:
    def test_zero_function_trivial(self, line, line_structure):
        ctx = PFormContext(line_structure, 3.0)
        assert p_form(GridFunction.constant(line, 0.0),
                      GridFunction.constant(line, 0.0), ctx) == 0.0

    def test_1d_sampled_bound(self, rng):
        d = GridDomain(((0.0, 1.0),), (16,))
        s = unit_structure(d)
        mask = boundary_mask(d)
        k = estimate_poincare(s, mask)
        for p in (2.0, 3.0):
            rep = check_coercive(PFormContext(s, p), k, mask, n_samples=30, rng=rng)
            assert rep.passed, rep.witness

    def test_2d_sampled_bound(self, square, rng):
        s = GridStructure(square, random_elliptic_field(square, rng))
        mask = boundary_mask(square)
        k = estimate_poincare(s, mask)
        rep = check_coercive(PFormContext(s, 3.0), k, mask, n_samples=20, rng=rng)
        assert rep.passed, rep.witness


class TestHemicontinuity:
    def test_equal_inputs_constant_map(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = random_function(square, rng)
        rep = check_hemicontinuous(u, u, ctx, samples=8)
        assert rep.passed
        assert rep.details["max_jump_fine"] == 0.0

    def test_p2_affine_in_t(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 2.0)
        u = random_function(square, rng)
        v = random_function(square, rng)
        rep = check_hemicontinuous(u, v, ctx, samples=16)
        assert rep.passed
        scale = max(abs(rep.details["max_jump_fine"]), 1.0)
        assert rep.details["max_second_difference"] <= 1e-9 * scale

    def test_p3_refinement_ratio(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = random_function(square, rng)
        v = random_function(square, rng)
        rep = check_hemicontinuous(u, v, ctx, samples=64)
        assert rep.passed and rep.lhs <= 0.75

    def test_rejects_too_few_samples(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = random_function(square, rng)
        with pytest.raises(ValueError):
            check_hemicontinuous(u, u, ctx, samples=2)


class TestContraction:
    def test_unit_on_interior_range_is_exact_zero(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = GridFunction(rng.uniform(0.1, 0.9, square.node_shape))
        v = random_function(square, rng)
        rep = check_contraction_operates(u, v, ctx, kind="unit")
        assert rep.passed
        assert rep.details["pairing"] == 0.0
        assert rep.details["regime"] == "exact"

    def test_unit_on_constant_two(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = GridFunction.constant(square, 2.0)
        v = random_function(square, rng)
        rep = check_contraction_operates(u, v, ctx, kind="unit")
        assert rep.passed and rep.details["pairing"] == 0.0

    def test_smooth_tanh_sweep(self, square, rng):
        s = GridStructure(square, random_elliptic_field(square, rng))
        ctx = PFormContext(s, 3.0)
        for _ in range(60):
            u = GridFunction(2.0 * rng.standard_normal(square.node_shape))
            v = GridFunction(2.0 * rng.standard_normal(square.node_shape))
            rep = check_contraction_operates(u, v, ctx, kind="smooth", T=np.tanh)
            assert rep.passed
            assert rep.details["pairing"] >= -rep.tolerance

    def test_threshold_and_negative_part(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 2.5)
        for _ in range(30):
            u = random_function(square, rng)
            v = random_function(square, rng)
            r1 = check_contraction_operates(u, v, ctx, kind="threshold", alpha=0.7)
            r2 = check_contraction_operates(u, v, ctx, kind="negative_part")
            assert r1.passed and r2.passed

    def test_rejects_expanding_map(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = random_function(square, rng)
        with pytest.raises(ValueError, match="contraction"):
            check_contraction_operates(u, u, ctx, kind="smooth", T=lambda x: 2.0 * x)

    def test_rejects_nonvanishing_at_zero(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 3.0)
        u = random_function(square, rng)
        with pytest.raises(ValueError, match="fix 0"):
            check_contraction_operates(u, u, ctx, kind="smooth",
                                       T=lambda x: np.clip(x + 0.5, -1, 1) * 0 + 0.5)


def _equilibrium_pair(p: float):
    d = GridDomain(((0.0, 1.0), (0.0, 1.0)), (17, 17))
    s = unit_structure(d)
    ctx = PFormContext(s, p)
    outer = boundary_mask(d)
    big = nodes_in_box(d, (0.25, 0.25), (0.75, 0.75))
    small = nodes_in_box(d, (0.375, 0.375), (0.625, 0.625))
    opts = SolveOptions(grad_tol=1e-10)
    e_big = capacity(Condenser(big, outer), ctx, opts).potential
    e_small = capacity(Condenser(small, outer), ctx, opts).potential
    return ctx, outer, e_big, e_small


class TestDirichletAxioms:
    def test_identical_potentials(self):
        ctx, outer, e_big, _ = _equilibrium_pair(3.0)
        rep = check_dirichlet_axioms(e_big, e_big, 0.25, ctx, mask=outer)
        assert rep.passed
        assert abs(rep.details["pairing_meet"]) <= rep.tolerance

    def test_nested_equilibrium_potentials(self):
        ctx, outer, e_big, e_small = _equilibrium_pair(3.0)
        rep = check_dirichlet_axioms(e_big, e_small, 0.5, ctx, mask=outer)
        assert rep.passed, rep.details

    def test_zero_partner(self):
        ctx, outer, e_big, _ = _equilibrium_pair(2.0)
        zero = GridFunction(np.zeros(ctx.domain.node_shape), outer)
        rep = check_dirichlet_axioms(e_big, zero, 0.5, ctx, mask=outer)
        assert rep.passed
        assert abs(rep.details["pairing_meet"]) <= rep.tolerance

    def test_rejects_non_potential(self, square, square_structure, rng):
        ctx = PFormContext(square_structure, 2.0)
        outer = boundary_mask(square)
        bad = GridFunction(np.where(outer, 0.0, rng.standard_normal(square.node_shape)), outer)
        with pytest.raises(PurePotentialError, match="node"):
            check_dirichlet_axioms(bad, bad, 0.1, ctx, mask=outer)

    def test_violation_locator(self, square, square_structure):
        ctx = PFormContext(square_structure, 2.0)
        vals = np.zeros(square.node_shape)
        vals[4, 4] = -1.0  # strict interior dip: negative coefficient nearby
        worst, node = pure_potential_violation(GridFunction(vals), ctx,
                                               mask=boundary_mask(square))
        assert worst < 0.0
        assert len(node) == 2
