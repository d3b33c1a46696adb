"""JSON config parsing with strict schema validation.

Every block is validated against an explicit key set before any
computation: unknown keys are rejected and missing required keys are
reported by name, so a config typo fails fast with exit code 1 rather
than producing a silently wrong run.

Solid shapes (intervals, disks, rectangles) are converted to node sets
with a half-spacing dilation: a node belongs to the set when it lies
within min(h)/2 of the shape.  Pinned lattice sets act with an effective
boundary about half a spacing inside their nominal one, so the dilation
centers the effective plate geometry on the requested shape; on grids
whose nodes align with the shape boundary the rule adds no nodes.
"""

from __future__ import annotations

import json
from typing import Any, Sequence

import numpy as np

from .capacity import Condenser
from .grid import (
    CoefficientField,
    GridDomain,
    GridFunction,
    GridStructure,
    boundary_mask,
)
from .mappings import (
    LinearMapping,
    Mapping,
    PowerMapping,
    RadialStretch,
    SampledMapping,
)
from .pform import PFormContext
from .solve import SolveOptions

__all__ = [
    "ConfigError",
    "load_config",
    "parse_domain",
    "parse_structure",
    "parse_context",
    "parse_solve_options",
    "parse_boundary",
    "parse_condenser",
    "parse_mapping",
    "parse_grid_function",
    "node_set_from_shape",
    "nearest_node",
]


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


def load_config(path: str) -> dict[str, Any]:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")
    return cfg


def _check_keys(block: dict, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be an object")
    for key in block:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in {where}")
    for key in required:
        if key not in block:
            raise ConfigError(f"missing required key '{key}' in {where}")


def parse_domain(cfg: dict[str, Any]) -> GridDomain:
    _check_keys(cfg, {"dim", "extent", "shape", "density"}, {"dim", "extent", "shape"},
                "domain")
    dim = cfg["dim"]
    extent = cfg["extent"]
    shape = cfg["shape"]
    if not isinstance(dim, int) or not 1 <= dim <= 3:
        raise ConfigError("domain.dim must be an integer in {1, 2, 3}")
    if len(extent) != dim or len(shape) != dim:
        raise ConfigError("domain.extent and domain.shape must match domain.dim")
    density = cfg.get("density")
    try:
        return GridDomain(tuple(tuple(e) for e in extent), tuple(shape),
                          None if density is None else np.asarray(density, dtype=float))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid domain: {exc}")


def _parse_field(spec: Any, domain: GridDomain) -> CoefficientField:
    if spec is None or spec == "identity":
        return CoefficientField.identity(domain)
    if isinstance(spec, str) and spec.startswith("scalar:"):
        try:
            return CoefficientField.scalar(domain, float(spec.split(":", 1)[1]))
        except ValueError as exc:
            raise ConfigError(f"invalid scalar field spec '{spec}': {exc}")
    if isinstance(spec, str) and spec.startswith("file:"):
        path = spec.split(":", 1)[1]
        try:
            with open(path) as fh:
                data = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read field file '{path}': {exc}")
        _check_keys(data, {"matrices", "alpha", "beta"}, {"matrices"}, "field file")
        n = domain.dim
        mats = np.asarray(data["matrices"], dtype=float).reshape(
            domain.cells_shape + (n, n))
        try:
            return CoefficientField.from_cells(domain, mats,
                                               data.get("alpha"), data.get("beta"))
        except ValueError as exc:
            raise ConfigError(f"invalid field file '{path}': {exc}")
    raise ConfigError(f"unrecognized field spec: {spec!r}")


def parse_structure(cfg: dict[str, Any]) -> GridStructure:
    if "domain" not in cfg:
        raise ConfigError("missing required key 'domain'")
    domain = parse_domain(cfg["domain"])
    return GridStructure(domain, _parse_field(cfg.get("field"), domain))


def parse_context(cfg: dict[str, Any]) -> PFormContext:
    structure = parse_structure(cfg)
    if "p" not in cfg:
        raise ConfigError("missing required key 'p'")
    try:
        return PFormContext(structure, float(cfg["p"]), float(cfg.get("eps", 0.0)))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid context: {exc}")


def parse_solve_options(cfg: dict[str, Any], tol_override: float | None = None) -> SolveOptions:
    block = cfg.get("solver", {})
    _check_keys(block, {"method", "grad_tol", "max_iter", "armijo_c1", "backtrack"},
                set(), "solver")
    try:
        return SolveOptions(
            method=block.get("method", "newton_regularized"),
            grad_tol=tol_override if tol_override is not None else block.get("grad_tol", 1e-8),
            max_iter=block.get("max_iter", 200),
            armijo_c1=block.get("armijo_c1", 1e-4),
            backtrack=block.get("backtrack", 0.5),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid solver options: {exc}")


def parse_grid_function(spec: dict[str, Any], domain: GridDomain) -> np.ndarray:
    _check_keys(spec, {"shape", "values"}, {"shape", "values"}, "grid function")
    shape = tuple(spec["shape"])
    if shape != domain.node_shape:
        raise ConfigError(
            f"grid function shape {list(shape)} does not match the domain nodes "
            f"{list(domain.node_shape)}")
    values = np.asarray(spec["values"], dtype=float).reshape(shape)
    return values


def nearest_node(domain: GridDomain, point: Sequence[float]) -> tuple[int, ...]:
    point = np.asarray(point, dtype=float)
    if point.shape != (domain.dim,):
        raise ConfigError(f"point {point.tolist()} has wrong dimension")
    idx = []
    for (a, b), s, x in zip(domain.extent, domain.shape, point):
        h = (b - a) / (s - 1)
        idx.append(int(np.clip(round((x - a) / h), 0, s - 1)))
    return tuple(idx)


def _half_spacing(domain: GridDomain) -> float:
    return 0.5 * min(domain.spacing)


def node_set_from_shape(spec: Any, domain: GridDomain) -> np.ndarray:
    """Node set of a shape primitive with the half-spacing dilation rule."""
    from .capacity import nodes_in_ball, nodes_in_box, nodes_in_interval, nodes_outside_ball

    if spec == "domain_boundary":
        return boundary_mask(domain)
    _check_keys(spec, {"type", "a", "b", "center", "radius", "min", "max", "indices"},
                {"type"}, "node set")
    kind = spec["type"]
    grow = _half_spacing(domain)
    if kind == "interval":
        _check_keys(spec, {"type", "a", "b"}, {"type", "a", "b"}, "interval set")
        return nodes_in_interval(domain, float(spec["a"]) - grow, float(spec["b"]) + grow)
    if kind == "disk":
        _check_keys(spec, {"type", "center", "radius"}, {"type", "center", "radius"},
                    "disk set")
        return nodes_in_ball(domain, spec["center"], float(spec["radius"]) + grow)
    if kind == "outside_disk":
        _check_keys(spec, {"type", "center", "radius"}, {"type", "center", "radius"},
                    "outside_disk set")
        return nodes_outside_ball(domain, spec["center"], float(spec["radius"]) - grow)
    if kind == "rect":
        _check_keys(spec, {"type", "min", "max"}, {"type", "min", "max"}, "rect set")
        lo = np.asarray(spec["min"], dtype=float) - grow
        hi = np.asarray(spec["max"], dtype=float) + grow
        return nodes_in_box(domain, lo, hi)
    if kind == "nodes":
        _check_keys(spec, {"type", "indices"}, {"type", "indices"}, "nodes set")
        mask = np.zeros(domain.node_shape, dtype=bool)
        for idx in spec["indices"]:
            idx = tuple(int(i) for i in (idx if isinstance(idx, (list, tuple)) else [idx]))
            if len(idx) != domain.dim:
                raise ConfigError(f"node index {list(idx)} has wrong dimension")
            mask[idx] = True
        return mask
    raise ConfigError(f"unknown node set type '{kind}'")


def parse_condenser(spec: dict[str, Any], domain: GridDomain) -> Condenser:
    _check_keys(spec, {"inner", "outer"}, {"inner", "outer"}, "condenser")
    inner = node_set_from_shape(spec["inner"], domain)
    outer = node_set_from_shape(spec["outer"], domain)
    try:
        return Condenser(inner & ~outer, outer)
    except ValueError as exc:
        raise ConfigError(f"invalid condenser: {exc}")


def parse_boundary(spec: dict[str, Any], domain: GridDomain) -> GridFunction:
    _check_keys(spec, {"mask", "values"}, {"values"}, "boundary")
    mask = node_set_from_shape(spec.get("mask", "domain_boundary"), domain)
    if not mask.any():
        raise ConfigError("boundary mask is empty")
    values_spec = spec["values"]
    if isinstance(values_spec, (int, float)):
        vals = np.full(domain.node_shape, float(values_spec))
    elif isinstance(values_spec, dict) and "affine" in values_spec:
        _check_keys(values_spec, {"affine"}, {"affine"}, "boundary values")
        aff = values_spec["affine"]
        _check_keys(aff, {"linear", "constant"}, {"linear"}, "affine boundary")
        lin = np.asarray(aff["linear"], dtype=float)
        if lin.shape != (domain.dim,):
            raise ConfigError("affine boundary 'linear' has wrong dimension")
        coords = domain.node_coords()
        vals = coords @ lin + float(aff.get("constant", 0.0))
    elif isinstance(values_spec, dict):
        vals = parse_grid_function(values_spec, domain)
    else:
        raise ConfigError("boundary values must be a number, an affine spec, or a grid")
    return GridFunction(np.where(mask, vals, 0.0), mask)


def parse_mapping(spec: dict[str, Any], domain: GridDomain) -> Mapping:
    _check_keys(spec, {"kind", "k", "a", "A", "file", "puncture"}, {"kind"}, "mapping")
    kind = spec["kind"]
    try:
        if kind == "power":
            _check_keys(spec, {"kind", "k", "puncture"}, {"kind", "k"}, "power mapping")
            return PowerMapping(domain, int(spec["k"]),
                                float(spec.get("puncture", 0.15)))
        if kind == "radial":
            _check_keys(spec, {"kind", "a", "puncture"}, {"kind", "a"}, "radial mapping")
            return RadialStretch(domain, float(spec["a"]),
                                 float(spec.get("puncture", 0.1)))
        if kind == "linear":
            _check_keys(spec, {"kind", "A"}, {"kind", "A"}, "linear mapping")
            return LinearMapping(domain, np.asarray(spec["A"], dtype=float))
        if kind == "sampled":
            _check_keys(spec, {"kind", "file"}, {"kind", "file"}, "sampled mapping")
            with open(spec["file"]) as fh:
                data = json.load(fh)
            _check_keys(data, {"shape", "values"}, {"shape", "values"}, "sampled file")
            vals = np.asarray(data["values"], dtype=float).reshape(
                tuple(data["shape"]) + (domain.dim,))
            return SampledMapping(domain, vals)
    except (ValueError, OSError) as exc:
        raise ConfigError(f"invalid mapping: {exc}")
    raise ConfigError(f"unknown mapping kind '{kind}'")
