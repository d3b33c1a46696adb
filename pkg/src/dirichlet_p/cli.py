"""Batch front door: JSON configs in, JSON reports out.

Subcommands: solve, capacity, caccioppoli, qr, metric, check.  Exit codes
follow a fixed contract so CI can tell classes of failure apart:

    0  success
    1  configuration error (schema violation, unknown/missing keys)
    2  computation failure (non-convergence, non-finite numbers)
    3  property-suite failure (an assertion in a report did not pass)

Reports are deterministic: a fixed seed produces byte-identical JSON, and
the --threads hint never enters the output (all reductions run in a fixed
order regardless of it).  DIRICHLET_P_LOG in {error, info, debug} controls
logging on stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from typing import Any

import numpy as np

from . import __version__
from .capacity import Condenser, capacity, check_choquet, check_union_difference
from .config import (
    ConfigError,
    load_config,
    nearest_node,
    node_set_from_shape,
    parse_boundary,
    parse_condenser,
    parse_context,
    parse_grid_function,
    parse_mapping,
    parse_solve_options,
)
from .grid import GridFunction, boundary_mask
from .mappings import analyze, verify_component_harmonicity
from .metric import (
    certify_gradient_bound,
    check_caccioppoli,
    check_caccioppoli_ball,
    check_caccioppoli_euclidean,
    cutoff_gamma_bound,
    distance_cutoff,
    intrinsic_distance,
    truncation_function,
)
from .pform import (
    check_contraction_operates,
    check_dirichlet_axioms,
    check_monotone,
    check_sector,
)
from .report import CheckReport, all_finite
from .solve import SolveError, solve_dirichlet, solve_obstacle

log = logging.getLogger("dirichlet_p")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_COMPUTE = 2
EXIT_PROPERTY = 3


def _grid_payload(values: np.ndarray) -> dict[str, Any]:
    return {"shape": list(values.shape), "values": [float(v) for v in values.reshape(-1)]}


def _json_default(obj: Any):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _harvest_failures(obj: Any) -> bool:
    """True when some nested report carries passed = False."""
    if isinstance(obj, dict):
        if obj.get("passed") is False:
            return True
        return any(_harvest_failures(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return any(_harvest_failures(v) for v in obj)
    return False


# -- subcommand implementations ------------------------------------------------

def _cmd_solve(cfg: dict, seed: int, tol: float | None) -> dict:
    ctx = parse_context(cfg)
    opts = parse_solve_options(cfg, tol)
    block = cfg.get("solve")
    if block is None:
        raise ConfigError("missing required key 'solve'")
    allowed = {"boundary", "obstacle"}
    for key in block:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in solve")
    if "boundary" not in block:
        raise ConfigError("missing required key 'boundary' in solve")
    boundary = parse_boundary(block["boundary"], ctx.domain)
    if "obstacle" in block:
        lower = np.full(ctx.domain.node_shape, -np.inf)
        obs = block["obstacle"]
        if isinstance(obs, dict) and "region" in obs:
            region = node_set_from_shape(obs["region"], ctx.domain)
            lower = np.where(region, float(obs.get("level", 0.0)), -np.inf)
        else:
            lower = parse_grid_function(obs, ctx.domain)
        result = solve_obstacle(ctx, GridFunction(lower), boundary, opts)
    else:
        result = solve_dirichlet(ctx, boundary, opts)
    return {
        "solution": _grid_payload(result.solution.values),
        "residual_norm": result.residual_norm,
        "iterations": result.iterations,
        "energy_trace": result.energy_trace,
        "diagnostics": {k: v for k, v in result.diagnostics.items() if k != "trace"},
    }


def _cmd_capacity(cfg: dict, seed: int, tol: float | None) -> dict:
    ctx = parse_context(cfg)
    opts = parse_solve_options(cfg, tol)
    block = cfg.get("capacity")
    if block is None:
        raise ConfigError("missing required key 'capacity'")
    if "condenser" not in block:
        raise ConfigError("missing required key 'condenser' in capacity")
    for key in block:
        if key not in {"condenser", "vi_samples"}:
            raise ConfigError(f"unknown key '{key}' in capacity")
    cond = parse_condenser(block["condenser"], ctx.domain)
    rng = np.random.default_rng(seed)
    result = capacity(cond, ctx, opts, vi_samples=int(block.get("vi_samples", 8)), rng=rng)
    return {
        "value": result.value,
        "vi_residual": result.vi_residual,
        "potential": _grid_payload(result.potential.values),
        "diagnostics": result.diagnostics,
    }


def _field_from_spec(kind: str, domain) -> np.ndarray:
    coords = domain.node_coords()
    if kind == "re_z2":
        if domain.dim != 2:
            raise ConfigError("re_z2 needs a 2-D domain")
        return coords[..., 0] ** 2 - coords[..., 1] ** 2
    if kind == "log_abs":
        r = np.linalg.norm(coords, axis=-1)
        if np.any(r <= 0):
            raise ConfigError("log_abs needs a domain omitting the origin")
        return np.log(r)
    raise ConfigError(f"unknown function kind '{kind}'")


def _parse_u(spec: Any, domain) -> np.ndarray:
    if isinstance(spec, str):
        return _field_from_spec(spec, domain)
    if isinstance(spec, dict) and "affine" in spec:
        lin = np.asarray(spec["affine"].get("linear", [0.0] * domain.dim), dtype=float)
        const = float(spec["affine"].get("constant", 0.0))
        return domain.node_coords() @ lin + const
    if isinstance(spec, dict):
        return parse_grid_function(spec, domain)
    raise ConfigError("unrecognized function spec for 'u'")


def _cmd_caccioppoli(cfg: dict, seed: int, tol: float | None) -> dict:
    ctx = parse_context(cfg)
    block = cfg.get("caccioppoli")
    if block is None:
        raise ConfigError("missing required key 'caccioppoli'")
    allowed = {"u", "c", "balls", "variant", "residual_tol", "neighborhood"}
    for key in block:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in caccioppoli")
    if "u" not in block or "balls" not in block:
        raise ConfigError("caccioppoli needs keys 'u' and 'balls'")
    u = GridFunction(_parse_u(block["u"], ctx.domain))
    variant = block.get("variant", "ball")
    residual_tol = float(block.get("residual_tol", 1e-3))
    cvalue = block.get("c")
    c = None if cvalue in (None, "mean") else float(cvalue)
    neighborhood = int(block.get("neighborhood", 16))
    checks: list[dict] = []
    for ball in block["balls"]:
        for key in ball:
            if key not in {"center", "r", "R"}:
                raise ConfigError(f"unknown key '{key}' in ball spec")
        src = nearest_node(ctx.domain, ball["center"])
        r, R = float(ball["r"]), float(ball["R"])
        if variant == "ball":
            rep = check_caccioppoli_ball(u, src, r, R, c, ctx,
                                         residual_tol=residual_tol,
                                         neighborhood=neighborhood)
        elif variant == "cutoff":
            phi = truncation_function(src, r, R, ctx.structure,
                                      neighborhood=neighborhood)
            rep = check_caccioppoli(u, phi, c, ctx, residual_tol=residual_tol)
        elif variant == "euclidean":
            coords = ctx.domain.node_coords()
            center = np.asarray(ball["center"], dtype=float)
            dist = np.linalg.norm(coords - center, axis=-1)
            phi = GridFunction(np.clip((R - dist) / (R - r), 0.0, 1.0))
            rep = check_caccioppoli_euclidean(
                u, phi, c, ctx.structure.field.alpha, ctx.structure.field.beta,
                ctx, residual_tol=residual_tol)
        else:
            raise ConfigError(f"unknown caccioppoli variant '{variant}'")
        checks.append(rep.to_dict())
    return {"variant": variant, "checks": checks}


def _cmd_qr(cfg: dict, seed: int, tol: float | None) -> dict:
    if "domain" not in cfg:
        raise ConfigError("missing required key 'domain'")
    from .config import parse_domain

    domain = parse_domain(cfg["domain"])
    block = cfg.get("qr")
    if block is None:
        raise ConfigError("missing required key 'qr'")
    allowed = {"mapping", "verify", "min_order", "include_log"}
    for key in block:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in qr")
    if "mapping" not in block:
        raise ConfigError("missing required key 'mapping' in qr")
    mapping = parse_mapping(block["mapping"], domain)
    analysis = analyze(mapping)
    eye_dev = float(np.max(np.abs(analysis.theta - np.eye(domain.dim))))
    out: dict[str, Any] = {
        "K_O": analysis.K_O,
        "K_I": analysis.K_I,
        "alpha": analysis.alpha,
        "beta": analysis.beta,
        "det_error": analysis.details["det_error"],
        "theta_identity_deviation": eye_dev,
        "excluded_measure": analysis.excluded_measure,
        "flagged_cells": analysis.details["flagged_cells"],
    }
    if block.get("verify", True):
        rep = verify_component_harmonicity(
            mapping, min_order=float(block.get("min_order", 1.0)),
            include_log=block.get("include_log"))
        out["harmonicity"] = rep.to_dict()
    return out


def _cmd_metric(cfg: dict, seed: int, tol: float | None) -> dict:
    from .config import parse_structure

    structure = parse_structure(cfg)
    block = cfg.get("metric")
    if block is None:
        raise ConfigError("missing required key 'metric'")
    allowed = {"source", "neighborhood", "targets", "cutoff", "truncation"}
    for key in block:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in metric")
    if "source" not in block:
        raise ConfigError("missing required key 'source' in metric")
    src = nearest_node(structure.domain, block["source"])
    neighborhood = int(block.get("neighborhood", 16))
    field = intrinsic_distance(src, structure, neighborhood)
    out: dict[str, Any] = {
        "source": list(src),
        "neighborhood": neighborhood,
        "metrication": field.metrication,
        "max_distance": float(np.max(field.distances)),
    }
    if "targets" in block:
        out["distances"] = [
            {"target": list(nearest_node(structure.domain, t)),
             "distance": field.at(nearest_node(structure.domain, t))}
            for t in block["targets"]
        ]
    bound = cutoff_gamma_bound(structure.domain.dim, neighborhood)
    if "cutoff" in block:
        r = float(block["cutoff"]["r"])
        cut = distance_cutoff(src, r, structure, field)
        cert = certify_gradient_bound(cut, structure, bound, "cutoff_gamma")
        out["cutoff"] = {"r": r, "certificate": cert.to_dict()}
    if "truncation" in block:
        r = float(block["truncation"]["r"])
        R = float(block["truncation"]["R"])
        tr = truncation_function(src, r, R, structure, field)
        cert = certify_gradient_bound(tr, structure, bound / (R - r) ** 2,
                                      "truncation_gamma")
        out["truncation"] = {"r": r, "R": R, "certificate": cert.to_dict()}
    return out


def _seeded_pair(rng: np.random.Generator, shape) -> tuple[GridFunction, GridFunction]:
    return (GridFunction(rng.standard_normal(shape)),
            GridFunction(rng.standard_normal(shape)))


def _cmd_check(cfg: dict, seed: int, tol: float | None) -> dict:
    ctx = parse_context(cfg)
    opts = parse_solve_options(cfg, tol)
    block = cfg.get("check", {})
    allowed = {"suites", "trials"}
    for key in block:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in check")
    suites = block.get("suites", ["sector", "monotone", "contraction"])
    trials = int(block.get("trials", 50))
    known = {"sector", "monotone", "contraction", "d1d2", "choquet", "union_diff"}
    for name in suites:
        if name not in known:
            raise ConfigError(f"unknown suite '{name}' (known: {sorted(known)})")
    rng = np.random.default_rng(seed)
    domain = ctx.domain
    shape = domain.node_shape
    reports: list[CheckReport] = []

    if "sector" in suites:
        for _ in range(trials):
            u, v = _seeded_pair(rng, shape)
            reports.append(check_sector(u, v, ctx))
    if "monotone" in suites:
        for _ in range(trials):
            u, v = _seeded_pair(rng, shape)
            reports.append(check_monotone(u, v, ctx))
    if "contraction" in suites:
        for i in range(trials):
            u, v = _seeded_pair(rng, shape)
            kind = ("unit", "negative_part", "threshold", "smooth")[i % 4]
            kwargs = {}
            if kind == "threshold":
                kwargs["alpha"] = float(rng.uniform(0.25, 1.5))
            if kind == "smooth":
                kwargs["T"] = np.tanh
            reports.append(check_contraction_operates(u, v, ctx, kind=kind, **kwargs))
    if "d1d2" in suites or "choquet" in suites or "union_diff" in suites:
        outer = boundary_mask(domain)
        sets = _seeded_sets(rng, domain)
        if "d1d2" in suites:
            e_big = capacity(Condenser(sets[0] | sets[1], outer), ctx, opts).potential
            e_small = capacity(Condenser(sets[1] & ~outer, outer), ctx, opts).potential \
                if (sets[1] & ~outer).any() else e_big
            reports.append(check_dirichlet_axioms(
                e_big, e_small, float(rng.uniform(0.1, 1.0)), ctx, mask=outer))
        if "choquet" in suites:
            reports.extend(check_choquet(sets, outer, ctx, opts))
        if "union_diff" in suites:
            f_sets = [_shrink(s) for s in sets]
            reports.append(check_union_difference(sets, f_sets, outer, ctx, opts))
    payload = [r.to_dict() for r in reports]
    return {"suites": suites, "trials": trials,
            "failed": sum(1 for r in reports if not r.passed),
            "checks": payload}


def _seeded_sets(rng: np.random.Generator, domain) -> list[np.ndarray]:
    """Deterministic family of boxes for the set-function suites."""
    from .capacity import nodes_in_box

    sets = []
    for _ in range(3):
        lo, hi = [], []
        for (a, b) in domain.extent:
            width = b - a
            c0 = a + width * rng.uniform(0.15, 0.45)
            c1 = c0 + width * rng.uniform(0.2, 0.4)
            lo.append(c0)
            hi.append(min(c1, b - 0.1 * width))
        sets.append(nodes_in_box(domain, lo, hi))
    return [s for s in sets if s.any()] or [nodes_in_box(domain, *zip(*[
        (a + 0.3 * (b - a), a + 0.7 * (b - a)) for a, b in domain.extent]))]


def _shrink(mask: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    eroded = ndimage.binary_erosion(mask, np.ones((3,) * mask.ndim, dtype=bool))
    return eroded if eroded.any() else mask


_COMMANDS = {
    "solve": _cmd_solve,
    "capacity": _cmd_capacity,
    "caccioppoli": _cmd_caccioppoli,
    "qr": _cmd_qr,
    "metric": _cmd_metric,
    "check": _cmd_check,
}


def _flatten_for_csv(report: dict) -> list[list[Any]]:
    rows: list[list[Any]] = []
    checks = None
    results = report.get("results", {})
    if isinstance(results, dict):
        checks = results.get("checks")
    if checks:
        header = ["check", "p", "grid", "passed", "lhs", "rhs", "slack", "tolerance"]
        rows.append(header)
        for c in checks:
            rows.append([c.get(k, "") for k in header])
    else:
        rows.append(["key", "value"])

        def walk(prefix: str, obj: Any) -> None:
            if isinstance(obj, dict):
                for k, v in obj.items():
                    walk(f"{prefix}.{k}" if prefix else str(k), v)
            elif isinstance(obj, (list, tuple)):
                if len(obj) <= 16:
                    for i, v in enumerate(obj):
                        walk(f"{prefix}[{i}]", v)
                else:
                    rows.append([prefix, f"<{len(obj)} values>"])
            else:
                rows.append([prefix, obj])

        walk("", results)
    return rows


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="dirichlet-p",
        description="Nonlinear p-form toolbox on finite-difference grids")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--out", help="write the JSON report here (default: stdout)")
    parser.add_argument("--csv", action="store_true",
                        help="also write a flattened CSV next to --out")
    parser.add_argument("--threads", type=int, default=0,
                        help="worker hint; reductions are deterministic regardless")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--tol", type=float, help="override the solver grad_tol")
    parser.add_argument("--version", action="version", version=__version__)
    args = parser.parse_args(argv)

    level = os.environ.get("DIRICHLET_P_LOG", "error").lower()
    logging.basicConfig(
        stream=sys.stderr,
        level={"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}.get(level, logging.ERROR),
        format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config)
        known_top = {"domain", "field", "p", "eps", "seed", "solver", "output",
                     "solve", "capacity", "caccioppoli", "qr", "metric", "check"}
        for key in cfg:
            if key not in known_top:
                raise ConfigError(f"unknown key '{key}' in config")
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        results = _COMMANDS[args.command](cfg, seed, args.tol)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolveError as exc:
        payload = {"command": args.command, "error": str(exc), "trace": exc.trace}
        _write(args, cfg if isinstance(cfg, dict) else {}, payload, failed=True)
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (ValueError, np.linalg.LinAlgError) as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTE

    report = {
        "command": args.command,
        "seed": seed,
        "version": __version__,
        "results": results,
    }
    if "p" in cfg:
        report["p"] = float(cfg["p"])
    if not all_finite(json.loads(json.dumps(report, default=_json_default))):
        print("computation produced non-finite values", file=sys.stderr)
        return EXIT_COMPUTE
    _write(args, cfg, report)
    if _harvest_failures(report):
        return EXIT_PROPERTY
    return EXIT_OK


def _write(args, cfg: dict, report: dict, failed: bool = False) -> None:
    text = json.dumps(report, sort_keys=True, indent=2, default=_json_default) + "\n"
    out = args.out or (cfg.get("output") if isinstance(cfg, dict) else None)
    if out:
        with open(out, "w") as fh:
            fh.write(text)
        if args.csv:
            base = out[:-5] if out.endswith(".json") else out
            with open(base + ".csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerows(_flatten_for_csv(report))
    else:
        sys.stdout.write(text)
        if args.csv:
            buf = io.StringIO()
            writer = csv.writer(buf)
            writer.writerows(_flatten_for_csv(report))
            sys.stdout.write(buf.getvalue())


if __name__ == "__main__":
    sys.exit(main())
