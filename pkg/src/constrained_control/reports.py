"""Verification reports and their text serialisation.

A report serialises to a single JSON object with sorted keys.  Non-finite
floats are written as the strings ``"inf"``, ``"-inf"`` and ``"nan"``::

    {"delta": 0.05, "estimate": 0.51, "n_paths": 100000, "name": "dpp_upper",
     "notes": [], "point": [0.0, 0.0, 0.5], "se": 0.0003, "seeds": [7],
     "slack": 0.012, "verdict": "pass", "extra": {...}}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

PASS, FAIL, INCONCLUSIVE = "pass", "fail", "inconclusive"
K_SE = 3.0
K_GRID = 2.0


def decide(slack: float, se: float, h: float = 0.0, k: float = K_SE, k_g: float = K_GRID,
           scale: Optional[float] = None) -> str:
    """Verdict for a one-sided inequality ``slack >= 0``.

    Fails below ``-(k se + k_g h)``.  When ``scale`` is given the verdict is
    inconclusive if ``k se`` exceeds it (the test has no power).
    """
    if not math.isfinite(se) or math.isnan(slack):
        return INCONCLUSIVE
    if slack == math.inf:
        return PASS
    if slack < -(k * se + k_g * h):
        return FAIL
    if scale is not None and k * se > scale:
        return INCONCLUSIVE
    return PASS


def _enc(v):
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    if isinstance(v, dict):
        return {str(k): _enc(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_enc(x) for x in v]
    if hasattr(v, "item"):
        return _enc(v.item())
    return v


def _dec(v):
    if v in ("inf", "-inf", "nan"):
        return float(v)
    if isinstance(v, dict):
        return {k: _dec(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_dec(x) for x in v]
    return v


@dataclass
class VerificationReport:
    name: str
    point: tuple
    estimate: float
    se: float
    slack: float
    verdict: str
    n_paths: int = 0
    seeds: tuple = ()
    delta: Optional[float] = None
    notes: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "point": [float(v) for v in self.point],
            "estimate": float(self.estimate),
            "se": float(self.se),
            "slack": float(self.slack),
            "verdict": self.verdict,
            "n_paths": int(self.n_paths),
            "seeds": [int(s) for s in self.seeds],
            "delta": None if self.delta is None else float(self.delta),
            "notes": list(self.notes),
            "extra": self.extra,
        }

    def to_text(self) -> str:
        return json.dumps(_enc(self.as_dict()), sort_keys=True)

    @classmethod
    def from_text(cls, text: str) -> "VerificationReport":
        d = _dec(json.loads(text))
        return cls(d["name"], tuple(d["point"]), float(d["estimate"]), float(d["se"]), float(d["slack"]),
                   d["verdict"], d["n_paths"], tuple(d["seeds"]), d["delta"], d["notes"], d["extra"])

    def summary_row(self) -> str:
        pt = ",".join(f"{v:g}" for v in self.point)
        return f"{self.name:<22} ({pt:<16}) est={self.estimate:+.5f} se={self.se:.2e} slack={self.slack:+.5f} {self.verdict}"
