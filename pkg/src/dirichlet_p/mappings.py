"""Quasiregular mapping analysis: differentials, dilatations, distortion.

For a mapping f of an n-dimensional box into R^n, the per-cell Jacobi
matrix Df and Jacobian J = det Df yield the outer and inner dilatations

    K_O = max_c |Df|^n / J,      K_I = max_c J / l(Df)^n,

(|Df| the largest, l(Df) the smallest singular value) and the
unit-determinant distortion tensor

    theta = J^(2/n) Df^-1 Df^-T,

whose eigenvalues lie in [K_O^(-2/n), K_I^(2/n)] cell by cell.  Feeding
theta back as the coefficient field of a grid structure, with exponent
p = n, produces the nonlinear form for which the components of f (and
log|f|, when f omits 0) are harmonic; `verify_component_harmonicity`
checks exactly that through mass-scaled residuals under grid refinement,
comparing residuals at the same physical nodes across resolutions.

Analytic kinds (plane powers, radial stretches, linear maps) are
differentiated in closed form at cell centers; sampled mappings reuse the
grid gradient so that their harmonicity tests live in one consistent
discrete calculus.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .grid import (
    CoefficientField,
    GridDomain,
    GridFunction,
    GridStructure,
    ShapeMismatchError,
    boundary_mask,
    gradient,
)
from .pform import PFormContext
from .solve import _region_interior
from .report import CheckReport

__all__ = [
    "Mapping",
    "PowerMapping",
    "RadialStretch",
    "LinearMapping",
    "SampledMapping",
    "JacobianField",
    "QrAnalysis",
    "differentiate",
    "dilatations",
    "distortion_tensor",
    "analyze",
    "induced_structure",
    "induced_context",
    "verify_component_harmonicity",
    "a_operator",
]


class Mapping:
    """Base: a mapping of a grid domain into R^n, n = domain dimension."""

    domain: GridDomain

    def node_values(self) -> np.ndarray:
        """Values at nodes, shape node_shape + (n,)."""
        raise NotImplementedError

    def cell_jacobian(self) -> np.ndarray:
        """Jacobi matrices at cell centers, shape cells_shape + (n, n)."""
        raise NotImplementedError

    def refined(self, factor: int = 2) -> "Mapping":
        raise NotImplementedError

    def omits_zero(self) -> bool:
        """Whether |f| is bounded away from 0 on the analysis region."""
        return False

    def safe_region(self) -> np.ndarray:
        """Node mask on which residuals are measured (excludes punctures)."""
        return ~boundary_mask(self.domain)

    def _component_functions(self) -> list[np.ndarray]:
        vals = self.node_values()
        return [vals[..., i] for i in range(self.domain.dim)]


def _puncture_mask(domain: GridDomain, radius: float) -> np.ndarray:
    coords = domain.node_coords()
    return np.linalg.norm(coords, axis=-1) > radius


@dataclass(eq=False)
class PowerMapping(Mapping):
    """Plane mapping z -> z^k (n = 2); conformal away from the origin.

    The puncture radius excludes a neighborhood of the branch point from
    the harmonicity region (log|f| is singular there).
    """

    domain: GridDomain
    k: int
    puncture: float = 0.15

    def __post_init__(self) -> None:
        if self.domain.dim != 2:
            raise ValueError("power mappings live in the plane")
        if self.k == 0:
            raise ValueError("exponent must be nonzero")

    def node_values(self) -> np.ndarray:
        c = self.domain.node_coords()
        z = c[..., 0] + 1j * c[..., 1]
        w = z ** self.k
        return np.stack([w.real, w.imag], axis=-1)

    def cell_jacobian(self) -> np.ndarray:
        c = self.domain.cell_centers()
        z = c[..., 0] + 1j * c[..., 1]
        fp = self.k * z ** (self.k - 1)
        a, b = fp.real, fp.imag
        row0 = np.stack([a, -b], axis=-1)
        row1 = np.stack([b, a], axis=-1)
        return np.stack([row0, row1], axis=-2)

    def refined(self, factor: int = 2) -> "PowerMapping":
        return PowerMapping(self.domain.refined(factor), self.k, self.puncture)

    def omits_zero(self) -> bool:
        return False  # z^k hits 0 at the origin; the region excludes it

    def safe_region(self) -> np.ndarray:
        scale = max(abs(b) for ab in self.domain.extent for b in ab)
        return _puncture_mask(self.domain, self.puncture * scale) & ~boundary_mask(self.domain)


@dataclass(eq=False)
class RadialStretch(Mapping):
    """x -> |x|^(a-1) x with a > 0; quasiconformal with both dilatations a.

    Defined on a box around the origin with a punctured neighborhood of 0
    removed from the analysis region (default radius 0.1 of the box
    half-width).
    """

    domain: GridDomain
    a: float
    puncture: float = 0.1

    def __post_init__(self) -> None:
        if self.a <= 0:
            raise ValueError("stretch exponent must be positive")

    def node_values(self) -> np.ndarray:
        c = self.domain.node_coords()
        r = np.linalg.norm(c, axis=-1)
        scale = np.where(r > 0, r ** (self.a - 1.0), 0.0)
        return scale[..., None] * c

    def cell_jacobian(self) -> np.ndarray:
        c = self.domain.cell_centers()
        n = self.domain.dim
        r = np.linalg.norm(c, axis=-1)
        rhat = c / np.where(r > 0, r, 1.0)[..., None]
        eye = np.broadcast_to(np.eye(n), c.shape[:-1] + (n, n))
        proj = rhat[..., :, None] * rhat[..., None, :]
        return np.where(r[..., None, None] > 0,
                        (r ** (self.a - 1.0))[..., None, None]
                        * (eye + (self.a - 1.0) * proj),
                        np.zeros_like(proj))

    def refined(self, factor: int = 2) -> "RadialStretch":
        return RadialStretch(self.domain.refined(factor), self.a, self.puncture)

    def omits_zero(self) -> bool:
        return True  # on the punctured region |f| = |x|^a > 0

    def safe_region(self) -> np.ndarray:
        scale = max(abs(b) for ab in self.domain.extent for b in ab)
        return _puncture_mask(self.domain, self.puncture * scale) & ~boundary_mask(self.domain)


@dataclass(eq=False)
class LinearMapping(Mapping):
    domain: GridDomain
    matrix: np.ndarray

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=float)
        n = self.domain.dim
        if self.matrix.shape != (n, n):
            raise ValueError("matrix dimension does not match the domain")

    def node_values(self) -> np.ndarray:
        return np.einsum("ij,...j->...i", self.matrix, self.domain.node_coords())

    def cell_jacobian(self) -> np.ndarray:
        n = self.domain.dim
        return np.broadcast_to(self.matrix, self.domain.cells_shape + (n, n)).copy()

    def refined(self, factor: int = 2) -> "LinearMapping":
        return LinearMapping(self.domain.refined(factor), self.matrix)

    def omits_zero(self) -> bool:
        return False


@dataclass(eq=False)
class SampledMapping(Mapping):
    """Mapping given by its node samples; differentiated with the grid gradient."""

    domain: GridDomain
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=float)
        expected = self.domain.node_shape + (self.domain.dim,)
        if self.values.shape != expected:
            raise ShapeMismatchError(f"expected samples of shape {expected}")

    def node_values(self) -> np.ndarray:
        return self.values

    def cell_jacobian(self) -> np.ndarray:
        comps = [gradient(self.values[..., i], self.domain)
                 for i in range(self.domain.dim)]
        return np.stack(comps, axis=-2)  # row i = grad of component i

    def refined(self, factor: int = 2) -> "SampledMapping":
        raise ValueError("sampled mappings cannot be refined; supply finer samples")


@dataclass(eq=False)
class JacobianField:
    """Per-cell Jacobi matrices, Jacobians, and the degeneracy flags."""

    Df: np.ndarray
    J: np.ndarray
    flagged: np.ndarray  # J <= 0: excluded from dilatations, reported

    @property
    def excluded_fraction(self) -> float:
        return float(np.mean(self.flagged))


def differentiate(mapping: Mapping) -> JacobianField:
    """Per-cell differential and Jacobian; cells with J <= 0 are flagged."""
    Df = mapping.cell_jacobian()
    J = np.linalg.det(Df)
    return JacobianField(Df=Df, J=J, flagged=J <= 0.0)


def dilatations(jf: JacobianField) -> tuple[float, float]:
    """Outer and inner dilatations over unflagged cells (both >= 1)."""
    ok = ~jf.flagged
    if not ok.any():
        raise ValueError("every cell is degenerate; no dilatations")
    sv = np.linalg.svd(jf.Df[ok], compute_uv=False)
    n = jf.Df.shape[-1]
    J = jf.J[ok]
    K_O = float(np.max(sv[..., 0] ** n / J))
    K_I = float(np.max(J / sv[..., -1] ** n))
    return K_O, K_I


def distortion_tensor(jf: JacobianField) -> np.ndarray:
    """Unit-determinant tensor J^(2/n) Df^-1 Df^-T per cell.

    Flagged cells get the identity (they are excluded from analysis and
    their mass is reported separately).
    """
    n = jf.Df.shape[-1]
    out = np.empty_like(jf.Df)
    eye = np.eye(n)
    ok = ~jf.flagged
    inv = np.linalg.inv(jf.Df[ok])
    theta = (jf.J[ok] ** (2.0 / n))[..., None, None] * (inv @ np.swapaxes(inv, -1, -2))
    theta = 0.5 * (theta + np.swapaxes(theta, -1, -2))
    out[ok] = theta
    out[jf.flagged] = eye
    return out


@dataclass(eq=False)
class QrAnalysis:
    """Everything the distortion analysis produces for one mapping."""

    jacobian: JacobianField
    singular_values: np.ndarray
    K_O: float
    K_I: float
    theta: np.ndarray
    alpha: float  # K_O^(-2/n)
    beta: float   # K_I^(2/n)
    excluded_measure: float
    details: dict[str, Any] = field(default_factory=dict)


def analyze(mapping: Mapping) -> QrAnalysis:
    """Differential, dilatations, distortion tensor, ellipticity bounds.

    Certifies the ellipticity sandwich per cell: every eigenvalue of theta
    lies in [K_O^(-2/n), K_I^(2/n)] up to rounding, and det theta = 1.
    """
    jf = differentiate(mapping)
    K_O, K_I = dilatations(jf)
    n = mapping.domain.dim
    theta = distortion_tensor(jf)
    sv = np.linalg.svd(jf.Df, compute_uv=False)
    alpha = K_O ** (-2.0 / n)
    beta = K_I ** (2.0 / n)
    eigs = np.linalg.eigvalsh(theta[~jf.flagged])
    tol = 1e-10 * max(beta, 1.0)
    lo = float(np.min(eigs)) if eigs.size else 1.0
    hi = float(np.max(eigs)) if eigs.size else 1.0
    if lo < alpha - tol or hi > beta + tol:
        raise ValueError(
            f"ellipticity certification failed: eigenvalues [{lo:.6g}, {hi:.6g}] "
            f"escape [{alpha:.6g}, {beta:.6g}]")
    dets = np.linalg.det(theta[~jf.flagged])
    det_err = float(np.max(np.abs(dets - 1.0))) if dets.size else 0.0
    excluded = float(np.sum(np.where(jf.flagged, mapping.domain.measure, 0.0)))
    return QrAnalysis(
        jacobian=jf, singular_values=sv, K_O=K_O, K_I=K_I, theta=theta,
        alpha=alpha, beta=beta, excluded_measure=excluded,
        details={"det_error": det_err, "flagged_cells": int(jf.flagged.sum())},
    )


def induced_structure(analysis: QrAnalysis, domain: GridDomain) -> GridStructure:
    """Grid structure whose coefficient field is the distortion tensor."""
    tol = 1e-9 * max(analysis.beta, 1.0)
    fld = CoefficientField(analysis.theta, analysis.alpha - tol, analysis.beta + tol)
    return GridStructure(domain, fld)


def induced_context(mapping: Mapping) -> tuple[QrAnalysis, PFormContext]:
    """Analysis plus the nonlinear context with exponent p = n."""
    analysis = analyze(mapping)
    structure = induced_structure(analysis, mapping.domain)
    return analysis, PFormContext(structure, float(mapping.domain.dim))


def _matched_residuals(mapping: Mapping, factor: int = 2,
                       include_log: bool | None = None) -> dict[str, Any]:
    """Residuals of components (and log|f|) at matched nodes, two levels."""
    fine = mapping.refined(factor)
    out: dict[str, Any] = {}
    levels = []
    for m in (mapping, fine):
        _, ctx = induced_context(m)
        region = m.safe_region()
        eligible = _region_interior(region, m.domain.dim)
        if not eligible.any():
            raise ValueError("analysis region has empty interior")
        from .pform import scaled_operator_field

        fields = {}
        comps = m._component_functions()
        for i, comp in enumerate(comps):
            fields[f"component_{i}"] = scaled_operator_field(GridFunction(comp), ctx)
        if include_log:
            vals = m.node_values()
            absf = np.linalg.norm(vals, axis=-1)
            if np.any(absf[region] <= 0):
                raise ValueError("log|f| requested but f hits 0 on the region")
            logf = np.where(absf > 0, np.log(np.where(absf > 0, absf, 1.0)), 0.0)
            fields["log_abs"] = scaled_operator_field(GridFunction(logf), ctx)
        levels.append((eligible, fields))
    coarse_eligible, coarse_fields = levels[0]
    fine_eligible, fine_fields = levels[1]
    idx = np.argwhere(coarse_eligible)
    fine_idx = tuple((idx * factor).T)
    on_fine_grid = fine_eligible[fine_idx]
    for name in coarse_fields:
        rc = float(np.max(coarse_fields[name][tuple(idx.T)]))
        rf_vals = fine_fields[name][fine_idx]
        rf = float(np.max(rf_vals[on_fine_grid])) if on_fine_grid.any() else float(
            np.max(rf_vals))
        out[name] = {"coarse": rc, "fine": rf}
    return out


def verify_component_harmonicity(mapping: Mapping, min_order: float = 1.0,
                                 include_log: bool | None = None,
                                 floor: float = 1e-10) -> CheckReport:
    """Refinement check that the components of f are harmonic for p = n.

    Residuals are mass-scaled operator pairings measured at the same
    physical nodes on the mapping's grid and its refinement.  Each field
    passes when either both residuals sit below the rounding floor (the
    discrete operator annihilates quadratic and cubic harmonics exactly)
    or the observed order log2(coarse/fine) reaches min_order.  log|f| is
    included automatically when the mapping omits zero on its region.
    """
    if include_log is None:
        include_log = mapping.omits_zero()
    res = _matched_residuals(mapping, include_log=include_log)
    rows = {}
    passed = True
    worst_order = math.inf
    for name, pair in res.items():
        rc, rf = pair["coarse"], pair["fine"]
        if rc <= floor and rf <= floor:
            rows[name] = {**pair, "regime": "exact_floor", "order": None}
            continue
        order = math.log2(rc / rf) if rf > 0 else math.inf
        ok = order >= min_order
        rows[name] = {**pair, "regime": "refinement", "order": order}
        passed = passed and ok
        worst_order = min(worst_order, order)
    n = mapping.domain.dim
    return CheckReport(
        check="component_harmonicity", p=float(n),
        grid=f"{n}d " + "x".join(str(s) for s in mapping.domain.shape),
        passed=passed,
        lhs=min_order, rhs=worst_order if worst_order < math.inf else float("inf"),
        slack=(worst_order - min_order) if worst_order < math.inf else float("inf"),
        tolerance=floor,
        details={"fields": rows, "include_log": include_log},
    )


def a_operator(G: np.ndarray, xi: np.ndarray, p: float) -> np.ndarray:
    """The monotone flux A(x, xi) = (G xi, xi)^((p-2)/2) G xi.

    Vectorized over leading axes of G and xi; satisfies
    (A(x, xi), xi) = (G xi, xi)^(p/2) and positive homogeneity of degree
    p - 1 in xi.
    """
    G = np.asarray(G, dtype=float)
    xi = np.asarray(xi, dtype=float)
    Gxi = np.einsum("...ij,...j->...i", G, xi)
    q = np.einsum("...i,...i->...", Gxi, xi)
    expo = (p - 2.0) / 2.0
    if expo == 0.0:
        w = np.ones_like(q)
    elif expo > 0.0:
        w = q ** expo
    else:
        w = np.where(q > 0, np.where(q > 0, q, 1.0) ** expo, 0.0)
    return w[..., None] * Gxi
