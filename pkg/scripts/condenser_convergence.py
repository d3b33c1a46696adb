#!/usr/bin/env python3
"""Convergence study: ring condenser capacity against the closed form.

Solves the disk-in-disk condenser (r = 0.25, R = 0.75, identity field,
p = 2) on a sequence of grids and tabulates the relative error against
4 pi / ln 3, plus the equilibrium-potential diagnostics.  Writes a JSON
table and prints a plain-text one.

Usage: python scripts/condenser_convergence.py [--sizes 33 65 129] [--out tab.json]
"""

import argparse
import json
import math
import pathlib
import sys
import time

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from dirichlet_p.capacity import Condenser, capacity  # noqa: E402
from dirichlet_p.config import node_set_from_shape  # noqa: E402
from dirichlet_p.grid import GridDomain, unit_structure  # noqa: E402
from dirichlet_p.pform import PFormContext  # noqa: E402
from dirichlet_p.solve import SolveOptions  # noqa: E402


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("--sizes", type=int, nargs="+", default=[33, 65, 129, 257])
    parser.add_argument("--p", type=float, default=2.0)
    parser.add_argument("--out", default=None)
    args = parser.parse_args()

    target = 4.0 * math.pi / math.log(3.0)
    rows = []
    print(f"{'nodes':>8} {'capacity':>12} {'rel error':>11} {'vi':>9} {'secs':>6}")
    for n in args.sizes:
        domain = GridDomain(((-1.0, 1.0), (-1.0, 1.0)), (n, n))
        ctx = PFormContext(unit_structure(domain), args.p)
        inner = node_set_from_shape(
            {"type": "disk", "center": [0.0, 0.0], "radius": 0.25}, domain)
        outer = node_set_from_shape(
            {"type": "outside_disk", "center": [0.0, 0.0], "radius": 0.75}, domain)
        t0 = time.perf_counter()
        result = capacity(Condenser(inner, outer), ctx, SolveOptions(grad_tol=1e-9))
        dt = time.perf_counter() - t0
        rel = (result.value - target) / target if args.p == 2.0 else float("nan")
        rows.append({"nodes": n, "capacity": result.value, "rel_error": rel,
                     "vi_residual": result.vi_residual, "seconds": dt})
        print(f"{n:>6}^2 {result.value:12.6f} {rel:+10.4%} "
              f"{result.vi_residual:9.1e} {dt:6.2f}")
    if args.p == 2.0:
        print(f"{'target':>8} {target:12.6f}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump({"target": target if args.p == 2.0 else None,
                       "p": args.p, "rows": rows}, fh, indent=2, sort_keys=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
