"""p-harmonic Dirichlet problems and the obstacle variational inequality.

The Dirichlet solve minimizes the convex potential `p_energy` over the
free nodes with pinned boundary values; convergence is declared on the
mass-scaled infinity norm of the operator coefficients (the same quantity
`harmonicity_residual` reports), not on energy decrements.  The default
method is Newton with the exact sparse Hessian and a Levenberg shift that
covers cells with degenerate gradient; the initial guess is the linear
(p = 2) solution, which already lies in the convex basin.

The obstacle solve enforces u >= obstacle through a bound-constrained
quasi-Newton warm start followed by active-set refinement, so the returned
complementarity system is crisp: inactive nodes carry residuals at solver
tolerance, active nodes sit exactly on the obstacle with nonnegative
multipliers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.optimize
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import ndimage

from .assemble import assemble_form_matrix, solve_linear_dirichlet
from .grid import GridFunction, ShapeMismatchError, _values, dp_norm, gradient
from .pform import PFormContext, _safe_power, p_energy, p_operator, scaled_operator_field

__all__ = [
    "SolveError",
    "SolveOptions",
    "SolveResult",
    "hessian_matrix",
    "solve_dirichlet",
    "solve_obstacle",
    "harmonicity_residual",
    "vi_residual",
]


class SolveError(RuntimeError):
    """Non-convergence; carries the energy/residual trace for diagnosis."""

    def __init__(self, message: str, trace: list[dict[str, float]] | None = None):
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True)
class SolveOptions:
    method: str = "newton_regularized"
    grad_tol: float = 1e-8
    max_iter: int = 200
    armijo_c1: float = 1e-4
    backtrack: float = 0.5

    def __post_init__(self) -> None:
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.method not in ("newton_regularized", "lbfgs", "gradient_armijo"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass(eq=False)
class SolveResult:
    solution: GridFunction
    residual_norm: float
    iterations: int
    energy_trace: list[float]
    diagnostics: dict[str, Any] = field(default_factory=dict)


def hessian_matrix(u, ctx: PFormContext) -> sp.csr_matrix:
    """Exact sparse Hessian of p_energy at u (positive semidefinite for p >= 2)."""
    s = ctx.structure
    g = gradient(u, ctx.domain)
    G = s.field.matrices
    Gg = np.einsum("...ij,...j->...i", G, g)
    base = 2.0 * np.einsum("...i,...i->...", Gg, g) + ctx.eps
    w = _safe_power(base, (ctx.p - 2.0) / 2.0)
    w4 = _safe_power(base, (ctx.p - 4.0) / 2.0)
    rank1 = 4.0 * (ctx.p - 2.0) * w4[..., None, None] * (Gg[..., :, None] * Gg[..., None, :])
    blocks = 2.0 * ctx.measure[..., None, None] * (w[..., None, None] * G + rank1)
    return assemble_form_matrix(ctx.domain, blocks)


def _scaled_residual(coeff: np.ndarray, node_mass: np.ndarray, free: np.ndarray) -> float:
    if not free.any():
        return 0.0
    return float(np.max(np.abs(coeff[free]) / node_mass[free]))


def _newton(vals: np.ndarray, mask: np.ndarray, ctx: PFormContext,
            opts: SolveOptions) -> tuple[np.ndarray, float, int, list[float], list[dict]]:
    domain = ctx.domain
    free = ~mask.reshape(-1)
    node_mass = domain.node_mass().reshape(-1)
    u = vals.reshape(-1).copy()

    def fun(x: np.ndarray) -> float:
        return p_energy(GridFunction(x.reshape(domain.node_shape)), ctx)

    def grad(x: np.ndarray) -> np.ndarray:
        gf = GridFunction(x.reshape(domain.node_shape))
        return p_operator(gf, ctx, mask=mask).coefficients.reshape(-1)

    J = fun(u)
    trace: list[dict] = []
    energy_trace = [J]
    lam = 0.0
    iterations = 0
    for it in range(opts.max_iter):
        g = grad(u)
        res = _scaled_residual(g, node_mass, free)
        trace.append({"iteration": it, "energy": J, "residual": res, "lambda": lam})
        if res <= opts.grad_tol:
            return u, res, iterations, energy_trace, trace
        H = hessian_matrix(GridFunction(u.reshape(domain.node_shape)), ctx).tocsc()
        H_ff = H[free][:, free]
        g_f = g[free]
        step = None
        for _attempt in range(25):
            shift = lam * sp.diags(np.maximum(H_ff.diagonal(), 1e-300)) if lam > 0 else None
            A = H_ff + shift if shift is not None else H_ff
            try:
                d = spla.splu(A.tocsc()).solve(-g_f)
            except RuntimeError:
                lam = max(lam * 10.0, 1e-10)
                continue
            slope = float(g_f @ d)
            if not np.isfinite(slope) or slope >= 0:
                lam = max(lam * 10.0, 1e-10)
                continue
            # energy differences below float resolution cannot drive an
            # Armijo test; accept on residual decrease instead
            resolution_limited = abs(slope) <= 1e-13 * (abs(J) + 1.0)
            t = 1.0
            ok = False
            while t > 1e-14:
                u_try = u.copy()
                u_try[free] += t * d
                J_try = fun(u_try)
                if resolution_limited:
                    res_try = _scaled_residual(grad(u_try), node_mass, free)
                    if res_try < res:
                        J_try = min(J_try, J)
                        ok = True
                        break
                elif J_try <= J + opts.armijo_c1 * t * slope:
                    ok = True
                    break
                t *= opts.backtrack
            if ok:
                step = (u_try, J_try, t)
                break
            lam = max(lam * 10.0, 1e-10)
        if step is None:
            raise SolveError("line search failed at a stationary-looking point", trace)
        u, J, t_used = step
        energy_trace.append(J)
        iterations += 1
        lam = lam / 3.0 if t_used == 1.0 else min(lam * 2.0 + 1e-12, 1e6)
        if lam < 1e-14:
            lam = 0.0
    g = grad(u)
    res = _scaled_residual(g, node_mass, free)
    if res <= opts.grad_tol:
        return u, res, iterations, energy_trace, trace
    trace.append({"iteration": opts.max_iter, "energy": J, "residual": res, "lambda": lam})
    raise SolveError(
        f"Newton did not reach grad_tol={opts.grad_tol:g} in {opts.max_iter} iterations "
        f"(residual {res:.3e})", trace)


def _first_order(vals: np.ndarray, mask: np.ndarray, ctx: PFormContext, opts: SolveOptions,
                 method: str) -> tuple[np.ndarray, float, int, list[float], list[dict]]:
    domain = ctx.domain
    free = ~mask.reshape(-1)
    node_mass = domain.node_mass().reshape(-1)
    base = vals.reshape(-1).copy()

    def embed(x: np.ndarray) -> np.ndarray:
        u = base.copy()
        u[free] = x
        return u

    def fun(x: np.ndarray) -> float:
        return p_energy(GridFunction(embed(x).reshape(domain.node_shape)), ctx)

    def jac(x: np.ndarray) -> np.ndarray:
        gf = GridFunction(embed(x).reshape(domain.node_shape))
        return p_operator(gf, ctx, mask=mask).coefficients.reshape(-1)[free]

    energy_trace = [fun(base[free])]
    trace: list[dict] = []
    x = base[free].copy()
    iterations = 0
    if method == "lbfgs":
        for round_ in range(6):
            out = scipy.optimize.minimize(
                fun, x, jac=jac, method="L-BFGS-B",
                options={"maxiter": opts.max_iter, "ftol": 1e-18, "gtol": 1e-14})
            x = out.x
            iterations += int(out.nit)
            energy_trace.append(float(out.fun))
            res = _scaled_residual(p_operator(
                GridFunction(embed(x).reshape(domain.node_shape)), ctx,
                mask=mask).coefficients.reshape(-1), node_mass, free)
            trace.append({"round": round_, "energy": float(out.fun), "residual": res})
            if res <= opts.grad_tol:
                return embed(x), res, iterations, energy_trace, trace
        raise SolveError(f"L-BFGS stalled at residual {res:.3e}", trace)
    # plain gradient descent with Armijo backtracking
    J = energy_trace[0]
    for it in range(opts.max_iter):
        g = jac(x)
        res = float(np.max(np.abs(g) / node_mass[free]))
        trace.append({"iteration": it, "energy": J, "residual": res})
        if res <= opts.grad_tol:
            return embed(x), res, iterations, energy_trace, trace
        d = -g / node_mass[free]
        slope = float(g @ d)
        t = 1.0
        while t > 1e-16:
            J_try = fun(x + t * d)
            if J_try <= J + opts.armijo_c1 * t * slope:
                break
            t *= opts.backtrack
        else:
            raise SolveError("gradient descent line search failed", trace)
        x = x + t * d
        J = J_try
        energy_trace.append(J)
        iterations += 1
    raise SolveError(
        f"gradient descent did not reach grad_tol in {opts.max_iter} iterations", trace)


def solve_dirichlet(ctx: PFormContext, boundary: GridFunction,
                    opts: SolveOptions | None = None,
                    initial: GridFunction | None = None) -> SolveResult:
    """Minimize the p-energy subject to the boundary mask of `boundary`.

    Returns the minimizer with the prescribed values on masked nodes and
    mass-scaled interior operator coefficients below grad_tol.  The
    default initial guess is the linear (p = 2) solution; the minimizer is
    unique, so different initial guesses agree to solver tolerance.
    Raises SolveError (with the iteration trace attached) on
    non-convergence.
    """
    opts = opts or SolveOptions()
    if boundary.mask is None or not boundary.mask.any():
        raise ValueError("solve_dirichlet needs a nonempty boundary mask")
    if boundary.values.shape != ctx.domain.node_shape:
        raise ShapeMismatchError("boundary data does not match the grid")
    mask = boundary.mask
    if initial is not None:
        vals = np.where(mask, boundary.values, initial.values)
    else:
        vals = np.where(mask, boundary.values, 0.0)
        vals = solve_linear_dirichlet(ctx.structure, vals, mask)
    start_energy = p_energy(GridFunction(vals), ctx)
    if opts.method == "newton_regularized":
        u, res, iters, etrace, trace = _newton(vals, mask, ctx, opts)
    else:
        u, res, iters, etrace, trace = _first_order(vals, mask, ctx, opts, opts.method)
    sol = GridFunction(u.reshape(ctx.domain.node_shape), mask)
    return SolveResult(
        solution=sol, residual_norm=res, iterations=iters, energy_trace=etrace,
        diagnostics={"method": opts.method, "grad_tol": opts.grad_tol,
                     "initial_energy": start_energy, "trace": trace},
    )


def _region_interior(region: np.ndarray, dim: int) -> np.ndarray:
    """Nodes of the region whose full stencil neighborhood stays inside it."""
    footprint = np.ones((3,) * dim, dtype=bool)
    return ndimage.binary_erosion(region, structure=footprint, border_value=0)


def harmonicity_residual(u, region: np.ndarray, ctx: PFormContext) -> float:
    """Largest mass-scaled pairing |<p_operator(u), hat_j>| over the region.

    Test nodes are those whose whole stencil neighborhood lies inside the
    region, so the value certifies harmonicity strictly inside it.  Zero
    (to rounding) for affine functions with a constant coefficient field.
    """
    region = np.asarray(region, dtype=bool)
    if region.shape != ctx.domain.node_shape:
        raise ShapeMismatchError("region mask does not match the grid")
    eligible = _region_interior(region, ctx.domain.dim)
    if not eligible.any():
        raise ValueError("region has empty interior")
    return float(np.max(scaled_operator_field(u, ctx)[eligible]))


def vi_residual(u: GridFunction, ctx: PFormContext, feasible: list[np.ndarray],
                mask: np.ndarray) -> float:
    """Worst normalized violation of <op(u), v - u> >= 0 over feasible samples."""
    F = p_operator(u, ctx, mask=mask)
    worst = 0.0
    for v in feasible:
        d = np.asarray(v, dtype=float) - u.values
        norm = dp_norm(GridFunction(d), ctx.structure, ctx.p)
        if norm == 0.0:
            continue
        worst = max(worst, -F.pair(d) / norm)
    return worst


def solve_obstacle(ctx: PFormContext, lower: GridFunction, boundary: GridFunction,
                   opts: SolveOptions | None = None,
                   complementarity_tol: float = 1e-8,
                   rng: np.random.Generator | None = None) -> SolveResult:
    """Solve min p_energy over {u >= lower, u = boundary on the mask}.

    The result satisfies, node by node on the free set: either the operator
    coefficient is nonnegative (up to tolerance) or u sits on the obstacle,
    and the product of slack and coefficient is small.  Diagnostics carry
    the active set size, the complementarity residual and a sampled check
    of the variational inequality.
    """
    opts = opts or SolveOptions()
    rng = rng or np.random.default_rng(0)
    if boundary.mask is None or not boundary.mask.any():
        raise ValueError("solve_obstacle needs a nonempty boundary mask")
    domain = ctx.domain
    mask = boundary.mask
    lo = _values(lower)
    if lo.shape != domain.node_shape:
        raise ShapeMismatchError("obstacle does not match the grid")
    pinned = np.where(mask, boundary.values, 0.0)
    if np.any(boundary.values[mask] < lo[mask] - 1e-14):
        raise ValueError("infeasible: boundary data lies below the obstacle")

    free = ~mask.reshape(-1)
    lo_flat = lo.reshape(-1)
    node_mass = domain.node_mass().reshape(-1)

    vals = solve_linear_dirichlet(ctx.structure, pinned, mask).reshape(-1)
    vals[free] = np.maximum(vals[free], lo_flat[free])

    def fun(x: np.ndarray) -> float:
        u = vals.copy()
        u[free] = x
        return p_energy(GridFunction(u.reshape(domain.node_shape)), ctx)

    def jac(x: np.ndarray) -> np.ndarray:
        u = vals.copy()
        u[free] = x
        gf = GridFunction(u.reshape(domain.node_shape))
        return p_operator(gf, ctx, mask=mask).coefficients.reshape(-1)[free]

    bounds = [(l if np.isfinite(l) else None, None) for l in lo_flat[free]]
    out = scipy.optimize.minimize(
        fun, vals[free], jac=jac, method="L-BFGS-B", bounds=bounds,
        options={"maxiter": max(200, opts.max_iter), "ftol": 1e-16, "gtol": 1e-12})
    vals[free] = out.x
    # energy_trace records the incumbent (best feasible) energy, so it is
    # nonincreasing even while the active set is being exchanged
    incumbent = float(out.fun)
    energy_trace = [incumbent]
    iterations = int(out.nit)

    scale = max(float(np.max(np.abs(vals))), 1.0)
    atol = complementarity_tol * scale
    active = free & (vals <= lo_flat + atol) & np.isfinite(lo_flat)
    trace: list[dict] = []
    for round_ in range(60):
        mask2 = mask.reshape(-1) | active
        vals2 = np.where(active, lo_flat, vals)
        bc = GridFunction(vals2.reshape(domain.node_shape),
                          mask2.reshape(domain.node_shape))
        inner = solve_dirichlet(ctx, bc, opts)
        vals = inner.solution.values.reshape(-1)
        iterations += inner.iterations
        coeff = p_operator(GridFunction(vals.reshape(domain.node_shape)), ctx,
                           mask=mask).coefficients.reshape(-1)
        violated = free & ~active & (vals < lo_flat - atol)
        negative_mult = active & (coeff < -complementarity_tol * np.maximum(node_mass, 1e-300))
        if not violated.any():
            incumbent = min(incumbent, inner.energy_trace[-1])
            energy_trace.append(incumbent)
        trace.append({"round": round_, "active": int(active.sum()),
                      "violated": int(violated.sum()),
                      "released": int(negative_mult.sum()),
                      "energy": inner.energy_trace[-1]})
        if not violated.any() and not negative_mult.any():
            break
        active = (active | violated) & ~negative_mult
        vals[violated] = lo_flat[violated]
    else:
        raise SolveError("active-set refinement did not stabilize", trace)

    u = GridFunction(vals.reshape(domain.node_shape), mask)
    coeff = p_operator(u, ctx, mask=mask).coefficients.reshape(-1)
    scaled = np.abs(coeff) / np.maximum(node_mass, 1e-300)
    inactive = free & ~active
    residual = float(np.max(scaled[inactive])) if inactive.any() else 0.0
    slack = np.where(np.isfinite(lo_flat), vals - lo_flat, np.inf)
    comp = float(np.max(np.abs(np.minimum(slack[free], 0.0)))) if free.any() else 0.0
    prod = float(np.max(np.minimum(slack[free], 1.0) * scaled[free])) if free.any() else 0.0

    feasible = []
    for _ in range(6):
        bump = np.abs(rng.standard_normal(vals.shape)) * scale * 0.1
        bump[mask.reshape(-1)] = 0.0
        feasible.append(vals + bump)
    feasible.append(np.where(free, np.maximum(vals, lo_flat) + scale, vals))
    vi = vi_residual(u, ctx, [f.reshape(domain.node_shape) for f in feasible], mask)

    return SolveResult(
        solution=u, residual_norm=residual, iterations=iterations,
        energy_trace=energy_trace,
        diagnostics={
            "method": "projected_lbfgs+active_set",
            "active_nodes": int(active.sum()),
            "complementarity_violation": comp,
            "complementarity_product": prod,
            "vi_residual": vi,
            "rounds": trace,
        },
    )
