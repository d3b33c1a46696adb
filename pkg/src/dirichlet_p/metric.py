"""Intrinsic metric, cutoff/truncation functions, Caccioppoli checks.

The intrinsic distance induced by the structure is the largest increment
u(x) - u(y) over functions with per-cell carre du champ at most 1.  For a
cell field G that constraint reads 2 (G grad u, grad u) <= 1, so distance
is the path length in the Riemannian metric (2G)^-1.  It is computed as a
shortest path on an extended lattice stencil (axis, diagonal and knight
moves) with edge lengths sqrt(e^T (2G)^-1 e); graph distances satisfy the
metric axioms exactly, and overestimate the continuum length by at most
the stencil's metrication constant (about 2.75 percent for the default
16-neighborhood in 2-D, about 8.24 percent for the 8-neighborhood).

Cutoff profiles (r - rho)+ and the two-radius truncation functions built
from them inherit per-cell gradient bounds (see cutoff_gamma_bound; the
constant is slightly larger than the distance one because cells next to
the source mix cone directions), which is what the Caccioppoli verifiers
consume.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .grid import (
    GridDomain,
    GridFunction,
    GridStructure,
    _values,
    boundary_mask,
    cell_mean,
    gamma,
    gradient,
)
from .pform import PFormContext, _safe_power
from .report import CheckReport
from .solve import harmonicity_residual

__all__ = [
    "MetricField",
    "CaccioppoliReport",
    "stencil_offsets",
    "metrication_constant",
    "cutoff_gamma_bound",
    "intrinsic_distance",
    "distance_cutoff",
    "truncation_function",
    "certify_gradient_bound",
    "intrinsic_ball_nodes",
    "intrinsic_ball_cells",
    "check_caccioppoli",
    "check_caccioppoli_ball",
    "check_caccioppoli_euclidean",
]


def stencil_offsets(dim: int, neighborhood: int = 16) -> list[tuple[int, ...]]:
    """Primitive lattice moves of the stencil.

    neighborhood=8 keeps max-norm-1 moves (axis and diagonal); 16 adds the
    knight-type moves, i.e. all primitive vectors of max-norm 2.  The names
    match the 2-D neighbor counts (8 and 16).
    """
    if neighborhood not in (8, 16):
        raise ValueError("neighborhood must be 8 or 16")
    top = 1 if neighborhood == 8 else 2
    offsets = []
    for v in itertools.product(range(-top, top + 1), repeat=dim):
        if all(c == 0 for c in v):
            continue
        if math.gcd(*(abs(c) for c in v)) != 1:
            continue
        offsets.append(v)
    return offsets


_METRICATION_CACHE: dict[tuple[int, int], float] = {}
_CUTOFF_BOUND_CACHE: dict[tuple[int, int], float] = {}


def metrication_constant(dim: int, neighborhood: int = 16) -> float:
    """Worst-case relative overestimation of Euclidean length by the stencil.

    Exact closed forms in 1-D and 2-D; in 3-D a direction sweep with small
    linear programs over the stencil cone (cached, reporting only).
    """
    if dim == 1:
        return 0.0
    if dim == 2:
        if neighborhood == 8:
            return math.sqrt(4.0 - 2.0 * math.sqrt(2.0)) - 1.0
        return math.sqrt(1.0 + (math.sqrt(5.0) - 2.0) ** 2) - 1.0
    key = (dim, neighborhood)
    if key not in _METRICATION_CACHE:
        _METRICATION_CACHE[key] = _sampled_metrication(dim, neighborhood)
    return _METRICATION_CACHE[key]


def _sampled_metrication(dim: int, neighborhood: int, samples: int = 600) -> float:
    from scipy.optimize import linprog

    offsets = np.array(stencil_offsets(dim, neighborhood), dtype=float)
    costs = np.linalg.norm(offsets, axis=1)
    rng = np.random.default_rng(12345)
    dirs = rng.standard_normal((samples, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    worst = 1.0
    for u in dirs:
        res = linprog(costs, A_eq=offsets.T, b_eq=u, bounds=[(0, None)] * len(costs),
                      method="highs")
        if res.success:
            worst = max(worst, float(res.fun))
    return worst - 1.0


def cutoff_gamma_bound(dim: int, neighborhood: int = 16) -> float:
    """Per-cell supremum of gamma over distance profiles, for constant G.

    This is larger than (1 + metrication)^2 would suggest for the wide
    stencil: cells on the second ring around the source mix cone
    directions.  In 2-D the suprema are closed forms, attained at those
    apex cells:

        8-neighborhood : 4 - 2 sqrt(2)                           = 1.17157...
        16-neighborhood: ((s - 1)^2 + (3 - s)^2) / 2,
                         s = sqrt(5/2) + sqrt(1/2)               = 1.08309...

    (for the 8-stencil this coincides with (1 + metrication)^2; both
    constants shrink as the stencil widens).  In 3-D the constant is
    probed numerically on a reference field and cached.
    """
    if dim == 1:
        return 1.0
    if dim == 2:
        if neighborhood == 8:
            return 4.0 - 2.0 * math.sqrt(2.0)
        s = math.sqrt(2.5) + math.sqrt(0.5)
        return ((s - 1.0) ** 2 + (3.0 - s) ** 2) / 2.0
    key = (dim, neighborhood)
    if key not in _CUTOFF_BOUND_CACHE:
        from .grid import GridDomain, unit_structure

        domain = GridDomain(((0.0, 1.0),) * dim, (13,) * dim)
        structure = unit_structure(domain)
        fld = intrinsic_distance((6,) * dim, structure, neighborhood)
        g = gamma(GridFunction(fld.distances), structure)
        _CUTOFF_BOUND_CACHE[key] = float(np.max(g)) * (1.0 + 1e-9)
    return _CUTOFF_BOUND_CACHE[key]


@dataclass(eq=False)
class MetricField:
    """Distances from one source node under the intrinsic metric."""

    source: tuple[int, ...]
    distances: np.ndarray
    neighborhood: int
    metrication: float

    def at(self, node: tuple[int, ...]) -> float:
        return float(self.distances[tuple(node)])


def _edge_weight_arrays(structure: GridStructure, offsets: list[tuple[int, ...]]):
    """Per-offset arrays of edge lengths from every source node.

    The metric tensor (2G)^-1 is sampled as the mean over the cells whose
    closed extent contains the segment midpoint; out-of-bounds targets get
    NaN.
    """
    domain = structure.domain
    dim = domain.dim
    shape = domain.node_shape
    cells = domain.cells_shape
    Minv = np.linalg.inv(2.0 * structure.field.matrices)
    h = np.asarray(domain.spacing)
    out = []
    for off in offsets:
        src_lo = [(-o if o < 0 else 0) for o in off]
        view = tuple(shape[a] - abs(off[a]) for a in range(dim))
        # candidate cells containing the segment midpoint, relative to the
        # source node: odd components pin one cell, even ones sit on a face
        cand_axes = []
        for o in off:
            if o % 2 == 0:
                cand_axes.append([o // 2 - 1, o // 2])
            else:
                cand_axes.append([(o - 1) // 2])
        acc = np.zeros(view + (dim, dim))
        count = np.zeros(view)
        for combo in itertools.product(*cand_axes):
            view_sl = []
            cell_sl = []
            ok = True
            for a, (c, lo) in enumerate(zip(combo, src_lo)):
                i0 = max(lo, -c)
                i1 = min(lo + view[a] - 1, cells[a] - 1 - c)
                if i0 > i1:
                    ok = False
                    break
                view_sl.append(slice(i0 - lo, i1 - lo + 1))
                cell_sl.append(slice(i0 + c, i1 + c + 1))
            if not ok:
                continue
            acc[tuple(view_sl)] += Minv[tuple(cell_sl)]
            count[tuple(view_sl)] += 1.0
        Mbar = acc / count[..., None, None]
        e = np.asarray(off, dtype=float) * h
        w = np.sqrt(np.einsum("i,...ij,j->...", e, Mbar, e))
        weights = np.full(shape, np.nan)
        weights[tuple(slice(lo, lo + v) for lo, v in zip(src_lo, view))] = w
        out.append((np.asarray(off, dtype=int), weights))
    return out


def intrinsic_distance(source: Sequence[int], structure: GridStructure,
                       neighborhood: int = 16) -> MetricField:
    """Shortest-path intrinsic distance from a source node (Dijkstra).

    The grid must be connected (it is, being a full box).  Distances are a
    genuine metric on the node set: symmetric, zero only at the source,
    triangle inequality exact.
    """
    domain = structure.domain
    src = tuple(int(i) for i in source)
    if len(src) != domain.dim:
        raise ValueError("source index has wrong dimension")
    for i, s in zip(src, domain.node_shape):
        if not 0 <= i < s:
            raise ValueError(f"source node {src} outside the grid")
    offsets = stencil_offsets(domain.dim, neighborhood)
    weighted = _edge_weight_arrays(structure, offsets)
    shape = domain.node_shape
    strides = np.array([int(np.prod(shape[a + 1:])) for a in range(domain.dim)], dtype=int)
    flat_offsets = np.array([int(np.dot(off, strides)) for off, _ in weighted])
    weight_flat = [w.reshape(-1) for _, w in weighted]

    n = domain.num_nodes
    dist = np.full(n, np.inf)
    start = int(np.ravel_multi_index(src, shape))
    dist[start] = 0.0
    done = np.zeros(n, dtype=bool)
    heap = [(0.0, start)]
    while heap:
        d, j = heapq.heappop(heap)
        if done[j]:
            continue
        done[j] = True
        for k in range(len(flat_offsets)):
            w = weight_flat[k][j]
            if not np.isfinite(w):
                continue
            t = j + flat_offsets[k]
            nd = d + w
            if nd < dist[t]:
                dist[t] = nd
                heapq.heappush(heap, (nd, t))
    return MetricField(
        source=src, distances=dist.reshape(shape), neighborhood=neighborhood,
        metrication=metrication_constant(domain.dim, neighborhood),
    )


def distance_cutoff(source: Sequence[int], r: float, structure: GridStructure,
                    field: MetricField | None = None,
                    neighborhood: int = 16) -> GridFunction:
    """Cutoff profile (r - rho(source, .)) v 0.

    Per-cell gamma of the result stays below cutoff_gamma_bound(dim,
    neighborhood) for constant coefficient fields; use
    `certify_gradient_bound` to attach the verdict.
    """
    if r <= 0:
        raise ValueError("radius must be positive")
    if field is None:
        field = intrinsic_distance(source, structure, neighborhood)
    return GridFunction(np.maximum(r - field.distances, 0.0))


def truncation_function(source: Sequence[int], r: float, R: float,
                        structure: GridStructure,
                        field: MetricField | None = None,
                        neighborhood: int = 16) -> GridFunction:
    """Two-radius profile: 1 on the r-ball, 0 off the R-ball, slope 1/(R-r).

    Built as min((R - rho)+, R - r) / (R - r).  Requires 0 < r < R and the
    closed R-ball inside the open box (no boundary node within distance R).
    """
    if not 0 < r < R:
        raise ValueError("need 0 < r < R")
    if field is None:
        field = intrinsic_distance(source, structure, neighborhood)
    rho = field.distances
    if np.any(rho[boundary_mask(structure.domain)] < R):
        raise ValueError("the outer ball escapes the domain")
    psi = np.minimum(np.maximum(R - rho, 0.0), R - r)
    return GridFunction(psi / (R - r))


def certify_gradient_bound(u: GridFunction, structure: GridStructure,
                           bound: float, label: str = "gradient_bound",
                           rtol: float = 1e-12) -> CheckReport:
    """Per-cell check gamma(u) <= bound, reported with the worst cell.

    The closed-form bounds are attained exactly, so a relative rounding
    tolerance covers floating-point attainment noise.
    """
    g = gamma(u, structure)
    worst = float(np.max(g)) if g.size else 0.0
    tol = rtol * bound
    return CheckReport(
        check=label, p=None, grid=structure.describe(),
        passed=worst <= bound + tol, lhs=worst, rhs=bound, slack=bound - worst,
        tolerance=tol, details={"max_cell_gamma": worst},
    )


def intrinsic_ball_nodes(field: MetricField, radius: float) -> np.ndarray:
    """Node set {rho < radius}."""
    return field.distances < radius


def intrinsic_ball_cells(field: MetricField, radius: float,
                         domain: GridDomain) -> np.ndarray:
    """Cells whose center (corner mean of rho) lies in the ball."""
    return cell_mean(field.distances, domain) < radius


@dataclass
class CaccioppoliReport:
    """Both sides of a Caccioppoli-type bound and the verdict."""

    lhs: float
    rhs: float
    constant: float
    tolerance: float
    passed: bool
    region: dict[str, Any] = field(default_factory=dict)
    details: dict[str, Any] = field(default_factory=dict)

    @property
    def slack(self) -> float:
        return self.rhs + self.tolerance - self.lhs

    def to_dict(self) -> dict[str, Any]:
        return {
            "lhs": self.lhs, "rhs": self.rhs, "constant": self.constant,
            "tolerance": self.tolerance, "passed": bool(self.passed),
            "slack": self.slack, "region": self.region, "details": self.details,
        }


class HarmonicityError(ValueError):
    """The input function is not certified harmonic where required."""


def _certify(u, support: np.ndarray, ctx: PFormContext, residual_tol: float) -> float:
    from scipy import ndimage

    region = ndimage.binary_dilation(support, np.ones((3,) * ctx.domain.dim, dtype=bool))
    resid = harmonicity_residual(u, region | support, ctx)
    if resid > residual_tol:
        raise HarmonicityError(
            f"harmonicity residual {resid:.3e} exceeds the certificate tolerance "
            f"{residual_tol:.3e} on the support region")
    return resid


def _tolerance_model(resid: float, support_mass: float, h: float,
                     lhs: float, rhs: float, p: float) -> float:
    # residual term: the pairing <op(u), phi^p (u - c)> is bounded by the
    # certified residual density integrated over the support; Leibniz-rule
    # straddle terms contribute O(h) relative to the two sides
    return (resid * support_mass) ** (1.0 / p) + h * (lhs + rhs)


def check_caccioppoli(u, phi: GridFunction, c: float | None, ctx: PFormContext,
                      residual_tol: float = 1e-3) -> CaccioppoliReport:
    """Weighted gradient bound for harmonic u and a nonnegative cutoff phi:

        ( int phi^p gamma(u)^(p/2) dm )^(1/p)
            <= p ( int gamma(phi)^(p/2) |u - c|^p dm )^(1/p) + tol

    u must certify harmonic on a neighborhood of supp(phi) (residual at
    most residual_tol); c defaults to the measure-weighted mean of u over
    the support, which minimizes the right side at p = 2.
    """
    phi_vals = _values(phi)
    if np.any(phi_vals < 0):
        raise ValueError("the cutoff must be nonnegative")
    support = phi_vals > 0
    if not support.any():
        raise ValueError("the cutoff vanishes identically")
    resid = _certify(u, support, ctx, residual_tol)

    domain = ctx.domain
    m = ctx.measure
    phibar = cell_mean(phi_vals, domain)
    ubar = cell_mean(u, domain)
    gu = gamma(u, ctx.structure)
    gphi = gamma(phi_vals, ctx.structure)
    if c is None:
        w = np.maximum(phibar, 0.0) * m
        c = float(np.sum(ubar * w) / np.sum(w))
    p = ctx.p
    lhs = float(np.sum(np.abs(phibar) ** p * _safe_power(gu, p / 2.0) * m)) ** (1.0 / p)
    rhs = p * float(np.sum(_safe_power(gphi, p / 2.0) * np.abs(ubar - c) ** p * m)) ** (1.0 / p)
    support_cells = cell_mean(support.astype(float), domain) > 0
    support_mass = float(np.sum(np.where(support_cells, m, 0.0)))
    tol = _tolerance_model(resid, support_mass, max(domain.spacing), lhs, rhs, p)
    return CaccioppoliReport(
        lhs=lhs, rhs=rhs, constant=p, tolerance=tol, passed=lhs <= rhs + tol,
        region={"support_nodes": int(support.sum())},
        details={"c": c, "residual": resid, "p": p},
    )


def check_caccioppoli_ball(u, source: Sequence[int], r: float, R: float,
                           c: float | None, ctx: PFormContext,
                           residual_tol: float = 1e-3,
                           neighborhood: int = 16) -> CaccioppoliReport:
    """Intrinsic-ball form with constant p / (R - r):

        ( int_{B_r} gamma(u)^(p/2) dm )^(1/p)
            <= p/(R-r) ( int_{B_R} |u - c|^p dm )^(1/p) + tol
    """
    if not 0 < r < R:
        raise ValueError("need 0 < r < R")
    field = intrinsic_distance(source, ctx.structure, neighborhood)
    ball_R_nodes = intrinsic_ball_nodes(field, R)
    resid = _certify(u, ball_R_nodes, ctx, residual_tol)

    domain = ctx.domain
    m = ctx.measure
    cells_r = intrinsic_ball_cells(field, r, domain)
    cells_R = intrinsic_ball_cells(field, R, domain)
    ubar = cell_mean(u, domain)
    if c is None:
        w = np.where(cells_R, m, 0.0)
        c = float(np.sum(ubar * w) / np.sum(w))
    p = ctx.p
    gu = gamma(u, ctx.structure)
    lhs = float(np.sum(np.where(cells_r, _safe_power(gu, p / 2.0) * m, 0.0))) ** (1.0 / p)
    rhs = (p / (R - r)) * float(
        np.sum(np.where(cells_R, np.abs(ubar - c) ** p * m, 0.0))) ** (1.0 / p)
    mass_R = float(np.sum(np.where(cells_R, m, 0.0)))
    tol = _tolerance_model(resid, mass_R, max(domain.spacing), lhs, rhs, p)
    return CaccioppoliReport(
        lhs=lhs, rhs=rhs, constant=p / (R - r), tolerance=tol, passed=lhs <= rhs + tol,
        region={"r": r, "R": R, "source": list(field.source),
                "ball_r_cells": int(cells_r.sum()), "ball_R_cells": int(cells_R.sum())},
        details={"c": c, "residual": resid, "p": p,
                 "metrication": field.metrication},
    )


def check_caccioppoli_euclidean(u, phi: GridFunction, c: float | None,
                                alpha: float, beta: float, ctx: PFormContext,
                                residual_tol: float = 1e-3) -> CaccioppoliReport:
    """Euclidean-gradient form for a uniformly elliptic field:

        ( int phi^p |grad u|^p dm )^(1/p)
            <= p sqrt(beta/alpha) ( int |grad phi|^p |u - c|^p dm )^(1/p) + tol

    with the constant exactly p * sqrt(beta / alpha).
    """
    if not 0 < alpha <= beta:
        raise ValueError("need 0 < alpha <= beta")
    phi_vals = _values(phi)
    if np.any(phi_vals < 0):
        raise ValueError("the cutoff must be nonnegative")
    support = phi_vals > 0
    if not support.any():
        raise ValueError("the cutoff vanishes identically")
    resid = _certify(u, support, ctx, residual_tol)

    domain = ctx.domain
    m = ctx.measure
    p = ctx.p
    gu = np.linalg.norm(gradient(u, domain), axis=-1)
    gphi = np.linalg.norm(gradient(phi_vals, domain), axis=-1)
    phibar = cell_mean(phi_vals, domain)
    ubar = cell_mean(u, domain)
    if c is None:
        w = np.maximum(phibar, 0.0) * m
        c = float(np.sum(ubar * w) / np.sum(w))
    constant = p * math.sqrt(beta / alpha)
    lhs = float(np.sum(np.abs(phibar) ** p * gu ** p * m)) ** (1.0 / p)
    rhs = constant * float(np.sum(gphi ** p * np.abs(ubar - c) ** p * m)) ** (1.0 / p)
    support_cells = cell_mean(support.astype(float), domain) > 0
    support_mass = float(np.sum(np.where(support_cells, m, 0.0)))
    tol = _tolerance_model(resid, support_mass, max(domain.spacing), lhs, rhs, p)
    return CaccioppoliReport(
        lhs=lhs, rhs=rhs, constant=constant, tolerance=tol, passed=lhs <= rhs + tol,
        region={"support_nodes": int(support.sum())},
        details={"c": c, "residual": resid, "p": p, "alpha": alpha, "beta": beta},
    )
