"""The nonlinear p-form, its generating operator, and executable checkers.

For a grid structure with carre du champ gamma and measure m, and p > 1,

    form_p(u, v) = sum_c (gamma(u)(c) + eps)^((p-2)/2) gamma(u, v)(c) m(c)

with the convex potential

    energy_p(u) = (1/p) sum_c (gamma(u)(c) + eps)^(p/2) m(c)

whose exact algebraic gradient is the monotone operator returned by
`p_operator`; the identity <p_operator(u), v> = form_p(u, v) holds to
machine precision by construction, not by discretization.  eps is a
regularization used below p = 2 where the integrand is singular at
gamma = 0; for p >= 2 it defaults to zero and all identities are exact.

The check_* functions turn the defining properties of the form
(homogeneity, sector condition, monotonicity, coercivity, hemicontinuity,
contraction compatibility and the pure-potential axioms) into executable
verdicts with explicit tolerances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse.linalg as spla

from .assemble import mass_matrix, stiffness_matrix
from .grid import (
    GridFunction,
    GridStructure,
    ShapeMismatchError,
    _values,
    carre_du_champ,
    dp_norm,
    gamma,
    gradient,
    gradient_adjoint,
)
from .report import CheckReport

__all__ = [
    "PFormContext",
    "NodeFunctional",
    "PurePotentialError",
    "p_form",
    "p_energy",
    "p_operator",
    "scaled_operator_field",
    "pure_potential_violation",
    "check_sector",
    "check_monotone",
    "check_coercive",
    "estimate_poincare",
    "check_hemicontinuous",
    "check_contraction_operates",
    "check_dirichlet_axioms",
]


@dataclass(frozen=True, eq=False)
class PFormContext:
    """A grid structure with the exponent p and the regularization policy.

    eps = 0 is permitted only for p >= 2; below that the weight
    gamma^((p-2)/2) is singular on cells with vanishing gradient and a
    strictly positive eps is required.  Results computed with eps > 0 are
    regularized and flagged as such by the reporting layer.
    """

    structure: GridStructure
    p: float
    eps: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "p", float(self.p))
        object.__setattr__(self, "eps", float(self.eps))
        if self.p <= 1:
            raise ValueError(f"the form needs p > 1, got p = {self.p}")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")
        if self.p < 2 and self.eps == 0:
            raise ValueError("p < 2 requires a positive regularization eps")

    @property
    def domain(self):
        return self.structure.domain

    @property
    def measure(self) -> np.ndarray:
        return self.structure.measure

    def describe(self) -> str:
        return self.structure.describe()


@dataclass(eq=False)
class NodeFunctional:
    """Nodal coefficients of a functional v -> sum_j F_j v_j.

    Coefficients on masked nodes are zeroed: the pairing ignores any test
    function supported there.
    """

    coefficients: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.coefficients = np.asarray(self.coefficients, dtype=float)
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.coefficients.shape:
                raise ShapeMismatchError("mask and coefficients have different shapes")
            self.coefficients = np.where(self.mask, 0.0, self.coefficients)

    def pair(self, v) -> float:
        vals = _values(v)
        if vals.shape != self.coefficients.shape:
            raise ShapeMismatchError("test function lives on a different grid")
        return float(np.sum(self.coefficients * vals))


def _safe_power(base: np.ndarray, expo: float) -> np.ndarray:
    """base**expo with the convention 0**0 = 1 and 0**negative = 0."""
    if expo == 0.0:
        return np.ones_like(base)
    if expo > 0.0:
        return base ** expo
    out = np.zeros_like(base)
    pos = base > 0.0
    out[pos] = base[pos] ** expo
    return out


def _weights(u, ctx: PFormContext) -> np.ndarray:
    return _safe_power(gamma(u, ctx.structure) + ctx.eps, (ctx.p - 2.0) / 2.0)


def p_form(u, v, ctx: PFormContext) -> float:
    """The nonlinear p-form: sum_c (gamma(u)+eps)^((p-2)/2) gamma(u,v) m.

    For p = 2 (and eps = 0) this coincides with twice the bilinear energy.
    Linear in v; homogeneous of degree p - 1 in u.
    """
    integrand = _weights(u, ctx) * carre_du_champ(u, v, ctx.structure)
    return float(np.sum(integrand * ctx.measure))


def p_energy(u, ctx: PFormContext) -> float:
    """Convex potential (1/p) int (gamma(u)+eps)^(p/2) dm.

    Its directional derivative at u in direction v equals p_form(u, v), and
    for eps = 0 it is positively homogeneous of degree p.
    """
    g = gamma(u, ctx.structure) + ctx.eps
    return float(np.sum(_safe_power(g, ctx.p / 2.0) * ctx.measure)) / ctx.p


def p_operator(u, ctx: PFormContext, mask: np.ndarray | None = None) -> NodeFunctional:
    """Gradient of p_energy at u: the monotone operator generating the form.

    <p_operator(u), v> = p_form(u, v) holds to machine precision for every
    v vanishing on the mask (taken from u when not given).  Homogeneous of
    degree p - 1 for eps = 0.
    """
    if mask is None and isinstance(u, GridFunction):
        mask = u.mask
    gu = gradient(u, ctx.domain)
    Ggu = np.einsum("...ij,...j->...i", ctx.structure.field.matrices, gu)
    w = _weights(u, ctx)
    q = 2.0 * (ctx.measure * w)[..., None] * Ggu
    return NodeFunctional(gradient_adjoint(q, ctx.domain), mask)


def scaled_operator_field(u, ctx: PFormContext) -> np.ndarray:
    """|coefficients of p_operator(u)| divided by the node mass.

    This is the residual density used for harmonicity certificates and for
    solver convergence: it is the pairing against the nodal hat function at
    j, normalized by the measure carried by node j.
    """
    coeff = p_operator(u, ctx, mask=np.zeros(ctx.domain.node_shape, dtype=bool)).coefficients
    return np.abs(coeff) / ctx.domain.node_mass()


def _pairing_difference(a, b, direction, ctx: PFormContext) -> float:
    """<p_operator(a) - p_operator(b), direction>, accumulated per cell.

    Computing the difference of the two integrands cell by cell keeps exact
    cancellations (cells where both terms agree bitwise) intact.
    """
    s = ctx.structure
    wa = _weights(a, ctx)
    wb = _weights(b, ctx)
    integrand = wa * carre_du_champ(a, direction, s) - wb * carre_du_champ(b, direction, s)
    return float(np.sum(integrand * ctx.measure))


def _magnitude_scale(u, v, ctx: PFormContext) -> float:
    """Natural size of pairings built from u and v (sector-type bound)."""
    eu = p_energy(u, ctx) * ctx.p
    ev = p_energy(v, ctx) * ctx.p
    return max(eu, ev, 1e-300)


# -- checkers ----------------------------------------------------------------

def check_sector(u, v, ctx: PFormContext) -> CheckReport:
    """Sector condition |form(u,v)| <= form(u,u)^((p-1)/p) form(v,v)^(1/p).

    Exact Hoelder on the finite cell sums; asserted with a pure rounding
    tolerance.
    """
    euv = p_form(u, v, ctx)
    euu = p_form(u, u, ctx)
    evv = p_form(v, v, ctx)
    lhs = abs(euv)
    rhs = max(euu, 0.0) ** ((ctx.p - 1.0) / ctx.p) * max(evv, 0.0) ** (1.0 / ctx.p)
    tol = 1e-12 * max(rhs, 1.0)
    return CheckReport(
        check="sector", p=ctx.p, grid=ctx.describe(),
        passed=lhs <= rhs + tol, lhs=lhs, rhs=rhs, slack=rhs - lhs, tolerance=tol,
        details={"form_uv": euv, "form_uu": euu, "form_vv": evv},
    )


def check_monotone(u, v, ctx: PFormContext) -> CheckReport:
    """Per-cell monotonicity of the operator, then the integrated pairing.

    The per-cell quantity w(u) gamma(u, u-v) - w(v) gamma(v, u-v) is
    nonnegative by the pointwise algebra of the carre du champ; integration
    gives <op(u) - op(v), u - v> >= 0.  When the pairing vanishes, gamma of
    the difference must vanish on every cell.
    """
    s = ctx.structure
    d = GridFunction(_values(u) - _values(v))
    wa = _weights(u, ctx)
    wb = _weights(v, ctx)
    percell = wa * carre_du_champ(u, d, s) - wb * carre_du_champ(v, d, s)
    pairing = float(np.sum(percell * ctx.measure))
    worst = float(np.min(percell)) if percell.size else 0.0
    scale = max(float(np.max(np.abs(percell))), 1.0)
    tol = 1e-12 * scale
    passed = worst >= -tol and pairing >= -tol * s.domain.total_measure
    details = {"pairing": pairing, "min_cell_value": worst}
    if abs(pairing) <= tol * s.domain.total_measure:
        gd = gamma(d, s)
        details["gamma_difference_max"] = float(np.max(gd)) if gd.size else 0.0
        passed = passed and details["gamma_difference_max"] <= math.sqrt(tol)
    return CheckReport(
        check="monotone", p=ctx.p, grid=ctx.describe(),
        passed=passed, lhs=-worst, rhs=0.0, slack=worst, tolerance=tol,
        details=details,
    )


def estimate_poincare(structure: GridStructure, mask: np.ndarray,
                      rtol: float = 1e-8, max_iter: int = 10_000) -> float:
    """Best constant k with  int ubar^2 dm <= k int gamma(u) dm  on the mask's complement.

    The right-hand side is the full carre du champ integral (twice the
    bilinear energy); with that pairing the unit interval with pinned ends
    and unit coefficient has the continuum constant 1/(2 pi^2).  Computed by
    inverse power iteration on the assembled quadratic forms, to relative
    tolerance `rtol`.
    """
    mask_flat = np.asarray(mask, dtype=bool).reshape(-1)
    if not mask_flat.any():
        raise ValueError("Poincare constant needs a nonempty Dirichlet mask")
    free = ~mask_flat
    if not free.any():
        raise ValueError("no free nodes left")
    S = stiffness_matrix(structure).tocsc()[free][:, free]
    M = mass_matrix(structure.domain).tocsc()[free][:, free]
    lu = spla.splu(S.tocsc())
    n = int(free.sum())
    x = 1.0 + 1e-3 * np.sin(np.arange(n, dtype=float))
    x /= np.linalg.norm(x)
    k_old = 0.0
    for _ in range(max_iter):
        y = lu.solve(M @ x)
        ny = np.linalg.norm(y)
        if ny == 0.0:
            raise ValueError("mass matrix annihilated the iterate; degenerate grid")
        x = y / ny
        num = float(x @ (M @ x))
        den = float(x @ (S @ x))
        k = num / den
        if abs(k - k_old) <= rtol * abs(k):
            return k
        k_old = k
    raise RuntimeError("inverse power iteration did not converge")


def check_coercive(ctx: PFormContext, k: float, mask: np.ndarray,
                   n_samples: int = 20, rng: np.random.Generator | None = None) -> CheckReport:
    """Sampled coercivity bound ||u||_{D_p}^p <= (1 + (sqrt(k) p / 2)^p) <op(u), u>.

    k must be a valid constant for  int ubar^2 dm <= k int gamma(u) dm  over
    functions vanishing on the mask (see estimate_poincare); the constant in
    front of the pairing is then inherited from the linear bound.  Violations
    are reported with the offending sample.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("coercivity needs a nonempty Dirichlet mask")
    rng = rng or np.random.default_rng(0)
    c = 1.0 + (math.sqrt(k) * ctx.p / 2.0) ** ctx.p
    worst = math.inf
    witness = None
    lhs_w = rhs_w = 0.0
    for i in range(n_samples):
        vals = rng.standard_normal(ctx.domain.node_shape)
        if i % 2 == 1:  # smoother samples exercise a different regime
            for axis in range(ctx.domain.dim):
                vals = 0.5 * vals + 0.25 * (np.roll(vals, 1, axis) + np.roll(vals, -1, axis))
        vals = np.where(mask, 0.0, vals)
        u = GridFunction(vals, mask)
        lhs = dp_norm(u, ctx.structure, ctx.p) ** ctx.p
        rhs = c * p_form(u, u, ctx)
        slack = rhs - lhs
        if slack < worst:
            worst, lhs_w, rhs_w = slack, lhs, rhs
            if slack < 0:
                witness = {"sample_index": i, "lhs": lhs, "rhs": rhs}
    tol = 1e-10 * max(abs(rhs_w), 1.0)
    return CheckReport(
        check="coercive", p=ctx.p, grid=ctx.describe(),
        passed=worst >= -tol, lhs=lhs_w, rhs=rhs_w, slack=worst, tolerance=tol,
        witness=witness, details={"constant": c, "poincare_k": k, "samples": n_samples},
    )


def check_hemicontinuous(u, v, ctx: PFormContext, samples: int = 64) -> CheckReport:
    """Continuity of t -> <op(v + t(u-v)), u - v> along the segment.

    Evaluates the scalar map on `samples` and on 2*samples uniform points of
    [0, 1] and requires the maximal jump between adjacent samples to decay
    (ratio <= 0.75) under the doubling, which certifies a finite modulus of
    continuity.  For p = 2 the map is affine in t.
    """
    if samples < 3:
        raise ValueError("need at least 3 samples")
    du = _values(u) - _values(v)
    vv = _values(v)
    d = GridFunction(du)

    def g(ts: np.ndarray) -> np.ndarray:
        return np.array([p_form(GridFunction(vv + t * du), d, ctx) for t in ts])

    t1 = np.linspace(0.0, 1.0, samples)
    t2 = np.linspace(0.0, 1.0, 2 * samples)
    g1 = g(t1)
    g2 = g(t2)
    jump1 = float(np.max(np.abs(np.diff(g1)))) if samples > 1 else 0.0
    jump2 = float(np.max(np.abs(np.diff(g2))))
    scale = max(float(np.max(np.abs(g1))), 1.0)
    floor = 1e-13 * scale
    if jump1 <= floor and jump2 <= floor:
        ratio = 0.0
    else:
        ratio = jump2 / max(jump1, floor)
    second = float(np.max(np.abs(np.diff(g2, 2)))) if len(g2) > 2 else 0.0
    return CheckReport(
        check="hemicontinuous", p=ctx.p, grid=ctx.describe(),
        passed=ratio <= 0.75, lhs=ratio, rhs=0.75, slack=0.75 - ratio, tolerance=0.0,
        details={"max_jump_coarse": jump1, "max_jump_fine": jump2,
                 "max_second_difference": second, "samples": samples},
    )


def _apply_contraction(kind: str, vals: np.ndarray, alpha: float | None,
                       T: Callable[[np.ndarray], np.ndarray] | None) -> np.ndarray:
    if kind == "unit":
        return np.clip(vals, 0.0, 1.0)
    if kind == "negative_part":
        return np.minimum(vals, 0.0)
    if kind == "threshold":
        if alpha is None or alpha <= 0:
            raise ValueError("threshold contraction needs alpha > 0")
        return np.clip(vals, 0.0, alpha)
    if kind == "smooth":
        if T is None:
            raise ValueError("smooth contraction needs the map T")
        return np.asarray(T(vals), dtype=float)
    raise ValueError(f"unknown contraction kind {kind!r}")


def _alignment(kind: str, vals: np.ndarray, alpha: float | None, domain) -> np.ndarray:
    """Per-cell flag: all corner values on one side of every threshold."""
    if kind == "unit":
        cuts = (0.0, 1.0)
    elif kind == "negative_part":
        cuts = (0.0,)
    elif kind == "threshold":
        cuts = (0.0, float(alpha))
    else:
        return np.ones(domain.cells_shape, dtype=bool)
    lo = vals
    hi = vals
    for axis in range(domain.dim):
        sl0 = [slice(None)] * domain.dim
        sl1 = [slice(None)] * domain.dim
        sl0[axis] = slice(None, -1)
        sl1[axis] = slice(1, None)
        lo = np.minimum(lo[tuple(sl0)], lo[tuple(sl1)])
        hi = np.maximum(hi[tuple(sl0)], hi[tuple(sl1)])
    levels = (-math.inf,) + cuts + (math.inf,)
    aligned = np.zeros(domain.cells_shape, dtype=bool)
    for a, b in zip(levels[:-1], levels[1:]):
        aligned |= (lo >= a) & (hi <= b)
    return aligned


def _validate_contraction(T: Callable[[np.ndarray], np.ndarray], lo: float, hi: float) -> None:
    span = max(hi - lo, 1.0)
    ts = np.linspace(lo - 0.1 * span, hi + 0.1 * span, 513)
    Tt = np.asarray(T(ts), dtype=float)
    slopes = np.abs(np.diff(Tt) / np.diff(ts))
    if np.max(slopes) > 1.0 + 1e-6:
        raise ValueError(f"map is not a contraction: sampled slope {np.max(slopes):.6g} > 1")
    at_zero = float(np.asarray(T(np.array([0.0])), dtype=float).reshape(-1)[0])
    if abs(at_zero) > 1e-12:
        raise ValueError("normal contraction must fix 0")


def check_contraction_operates(u, v, ctx: PFormContext, kind: str = "unit",
                               alpha: float | None = None,
                               T: Callable[[np.ndarray], np.ndarray] | None = None) -> CheckReport:
    """Compatibility of a normal contraction with the operator.

    For the clipping kinds (unit, negative_part, threshold) this evaluates
    the exchange pairing <op(v + Tu) - op(v), u - Tu> and asserts it is
    nonnegative.  On cells whose corner values of u all fall on one side of
    every clipping threshold the two integrands agree bitwise, so aligned
    inputs are checked at rounding accuracy; cells straddling a threshold
    contribute O(h) and widen the tolerance to C*h with C reported.

    For a smooth kind (|T'| <= 1, T(0) = 0, validated by sampling) the
    stronger pairing <op(u + Tu + v) - op(v), u - Tu> is asserted at
    rounding accuracy: the underlying per-cell inequality chain is purely
    algebraic.
    """
    uvals = _values(u)
    vvals = _values(v)
    if kind == "smooth":
        _validate_contraction(T, float(np.min(uvals)), float(np.max(uvals)))
    Tu = _apply_contraction(kind, uvals, alpha, T)
    direction = GridFunction(uvals - Tu)
    if kind == "smooth":
        a = GridFunction(uvals + Tu + vvals)
    else:
        a = GridFunction(vvals + Tu)
    b = GridFunction(vvals)
    pairing = _pairing_difference(a, b, direction, ctx)

    aligned = _alignment(kind, uvals, alpha, ctx.domain)
    all_aligned = bool(np.all(aligned))
    scale = _magnitude_scale(a, b, ctx)
    h_max = max(ctx.domain.spacing)
    if kind == "smooth" or all_aligned:
        tol = 1e-12 * max(scale, 1.0)
        regime = "exact"
    else:
        tol = scale * h_max
        regime = "straddling"
    return CheckReport(
        check=f"contraction_{kind}", p=ctx.p, grid=ctx.describe(),
        passed=pairing >= -tol, lhs=-pairing, rhs=0.0, slack=pairing, tolerance=tol,
        details={
            "pairing": pairing,
            "regime": regime,
            "aligned_cells": int(np.sum(aligned)),
            "total_cells": int(aligned.size),
            "tolerance_constant": scale if regime == "straddling" else 0.0,
            "h": h_max,
        },
    )


class PurePotentialError(ValueError):
    """An input function fails the pure-potential cone condition."""


def pure_potential_violation(u, ctx: PFormContext,
                             mask: np.ndarray | None = None) -> tuple[float, tuple[int, ...]]:
    """Most negative operator coefficient off the mask, with its node.

    A pure potential pairs nonnegatively with every nonnegative test
    function, which on the grid is a coefficientwise sign condition.
    Returns (worst coefficient, node index); worst >= 0 means clean.
    """
    if mask is None and isinstance(u, GridFunction):
        mask = u.mask
    coeff = p_operator(u, ctx, mask=mask).coefficients
    j = int(np.argmin(coeff))
    idx = np.unravel_index(j, coeff.shape)
    return float(coeff[idx]), tuple(int(i) for i in idx)


def _require_pure_potential(u, name: str, ctx: PFormContext, mask: np.ndarray | None) -> None:
    coeff = p_operator(u, ctx, mask=mask).coefficients
    scale = float(np.max(np.abs(coeff))) if coeff.size else 0.0
    worst, idx = pure_potential_violation(u, ctx, mask=mask)
    if worst < -1e-10 * max(scale, 1e-300):
        raise PurePotentialError(
            f"{name} is not a pure potential: coefficient {worst:.3e} at node {idx}"
        )


def check_dirichlet_axioms(u, v, alpha: float, ctx: PFormContext,
                           mask: np.ndarray | None = None) -> CheckReport:
    """The two pure-potential axioms of a nonlinear Dirichlet form.

    With u, v validated as pure potentials and alpha >= 0, asserts

        <op(u ^ v),          u - u ^ v>           >= -tol
        <op(u ^ (v + a)),    u - u ^ (v + a)>     >= -tol

    at rounding accuracy when every cell is aligned with the comparison
    level sets, and with tol = C*h (C reported) otherwise.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    _require_pure_potential(u, "u", ctx, mask)
    _require_pure_potential(v, "v", ctx, mask)
    uvals = _values(u)
    vvals = _values(v)
    # inputs are pure potentials only up to solver tolerance; on aligned
    # cells the pairing reduces to <op(v), (u - v - shift)+>, so the negative
    # part of v's coefficients bounds how far below zero it can drift
    v_coeff = p_operator(v, ctx, mask=mask if mask is not None else getattr(v, "mask", None))
    neg_mass = float(np.sum(np.maximum(-v_coeff.coefficients, 0.0)))

    def one(other: np.ndarray) -> tuple[float, bool, float]:
        w = np.minimum(uvals, other)
        pairing = p_form(GridFunction(w), GridFunction(uvals - w), ctx)
        diff = uvals - other
        lo = diff
        hi = diff
        for axis in range(ctx.domain.dim):
            sl0 = [slice(None)] * ctx.domain.dim
            sl1 = [slice(None)] * ctx.domain.dim
            sl0[axis] = slice(None, -1)
            sl1[axis] = slice(1, None)
            lo = np.minimum(lo[tuple(sl0)], lo[tuple(sl1)])
            hi = np.maximum(hi[tuple(sl0)], hi[tuple(sl1)])
        aligned = bool(np.all((hi <= 0.0) | (lo >= 0.0)))
        scale = _magnitude_scale(GridFunction(w), GridFunction(uvals), ctx)
        slack_bound = neg_mass * float(np.max(np.maximum(diff, 0.0), initial=0.0))
        if aligned:
            tol = 1e-12 * max(scale, 1.0) + slack_bound
        else:
            tol = scale * max(ctx.domain.spacing) + slack_bound
        return pairing, aligned, tol

    p1, aligned1, tol1 = one(vvals)
    p2, aligned2, tol2 = one(vvals + float(alpha))
    passed = (p1 >= -tol1) and (p2 >= -tol2)
    worst = min(p1 + tol1, p2 + tol2)
    return CheckReport(
        check="dirichlet_axioms", p=ctx.p, grid=ctx.describe(),
        passed=passed, lhs=-min(p1, p2), rhs=0.0, slack=min(p1, p2),
        tolerance=max(tol1, tol2),
        details={
            "pairing_meet": p1, "pairing_shifted": p2, "alpha": float(alpha),
            "aligned_meet": aligned1, "aligned_shifted": aligned2,
        },
    )
