"""Uniform result records for the property checkers."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

__all__ = ["CheckReport", "all_finite"]


@dataclass
class CheckReport:
    """Outcome of one inequality or identity check.

    slack = rhs - lhs for inequalities of the form lhs <= rhs + tolerance;
    passed means slack >= -tolerance.  `witness` optionally records the
    offending input, `details` carries check-specific extras.
    """

    check: str
    p: float | None
    grid: str
    passed: bool
    lhs: float
    rhs: float
    slack: float
    tolerance: float
    witness: dict[str, Any] | None = None
    details: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "check": self.check,
            "p": self.p,
            "grid": self.grid,
            "passed": bool(self.passed),
            "lhs": self.lhs,
            "rhs": self.rhs,
            "slack": self.slack,
            "tolerance": self.tolerance,
        }
        if self.witness is not None:
            out["witness"] = self.witness
        if self.details:
            out["details"] = self.details
        return out

    def to_json(self, **kwargs: Any) -> str:
        kwargs.setdefault("sort_keys", True)
        return json.dumps(self.to_dict(), **kwargs)


def all_finite(obj: Any) -> bool:
    """True when every number nested inside obj is finite."""
    if isinstance(obj, bool):
        return True
    if isinstance(obj, (int, float)):
        return math.isfinite(obj)
    if isinstance(obj, dict):
        return all(all_finite(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return all(all_finite(v) for v in obj)
    return True
