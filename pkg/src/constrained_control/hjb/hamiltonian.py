"""Pointwise Hamiltonians and solver parameters.

For the augmented state ``(x, m)`` with martingale integrand ``a`` the
generator acting on a smooth ``phi`` is

    mu . p_x + 1/2 tr(sigma sigma^T Q_xx) + a^T sigma^T Q_xm + 1/2 |a|^2 Q_mm

and ``H`` is the infimum of its negative over ``U x [-A, A]^d``.  The
a-part separates per coordinate, so for a fixed ``u`` it is minimised in
closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from ..model import ProblemSpec

TIE_TOL = 1e-12


@dataclass(frozen=True)
class HamiltonianParams:
    """Discretisation of the control search and solver knobs.

    ``a_points`` is the number of a-values per coordinate on ``[-A, A]``
    (odd, so 0 is on the grid).  ``u_points`` overrides the control set's
    own points-per-axis hint.  ``mask_margin`` defaults to one m-cell.
    """

    A: float = 2.0
    u_points: Optional[int] = None
    a_points: int = 21
    rho: float = 0.0
    stencil_kappa: float = 0.5
    cfl: float = 0.95
    cfl_mode: str = "substep"
    mask_margin: Optional[float] = None
    boundary: str = "neumann"
    max_nodes: int = 50_000_000

    def __post_init__(self):
        if not self.A > 0:
            raise ValueError("truncation radius A must be > 0")
        if self.a_points < 1 or (self.u_points is not None and self.u_points < 1):
            raise ValueError("control resolutions must be >= 1")
        if self.a_points % 2 == 0:
            raise ValueError("a_points must be odd so that a = 0 is on the grid")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.cfl_mode not in ("substep", "strict"):
            raise ValueError("cfl_mode is 'substep' or 'strict'")
        if self.boundary not in ("neumann", "extrapolate"):
            raise ValueError("boundary is 'neumann' or 'extrapolate'")
        if not 0 < self.cfl <= 1:
            raise ValueError("cfl factor must lie in (0, 1]")

    def u_grid(self, spec: ProblemSpec) -> np.ndarray:
        return spec.controls.grid(self.u_points)

    def a_values(self) -> np.ndarray:
        """Per-coordinate a-grid ordered by (|a|, a): 0, -h, h, -2h, ..."""
        if self.a_points == 1:
            return np.zeros(1)
        vals = np.linspace(-self.A, self.A, self.a_points)
        order = np.lexsort((vals, np.abs(vals)))
        return vals[order]

    def a_grid(self, dim: int) -> np.ndarray:
        """Product a-grid (n, dim); the first coordinate varies slowest."""
        v = self.a_values()
        mesh = np.meshgrid(*([v] * dim), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def as_dict(self) -> dict:
        return asdict(self)


def _a_closed_form(c, qmm, A):
    """Maximiser of ``a c + a^2 qmm / 2`` on [-A, A] under the (|a|, a) order."""
    c = np.asarray(c, dtype=float)
    if qmm < 0:
        return np.clip(-c / qmm, -A, A)
    # convex or linear: a corner, unless the objective is flat
    a = np.where(c > 0, A, -A)
    if qmm == 0:
        a = np.where(c == 0, 0.0, a)
    return a


def hamiltonian(spec: ProblemSpec, params: HamiltonianParams, x, p, Q, t: float = 0.0):
    """``H(x, p, Q)`` for the augmented problem.

    ``p`` has d+1 entries (x-gradient then m-derivative) and ``Q`` is the
    (d+1) x (d+1) Hessian.  Returns ``(value, (u, a))``; ties between
    controls go to the first one in lexicographic order.
    """
    d = spec.dim
    x = np.asarray(x, dtype=float).reshape(d)
    p = np.asarray(p, dtype=float).reshape(d + 1)
    Q = np.asarray(Q, dtype=float).reshape(d + 1, d + 1)
    Qxx, Qxm, qmm = Q[:d, :d], 0.5 * (Q[:d, d] + Q[d, :d]), float(Q[d, d])
    us = params.u_grid(spec)
    mu = spec.mu(x[None, :], us, t)  # (nu, d)
    sg = spec.sigma(x[None, :], us, t)  # (nu, d, d)
    best_val, best = np.inf, None
    for i, u in enumerate(us):
        s = sg[i]
        c = s.T @ Qxm
        a = _a_closed_form(c, qmm, params.A)
        gen = mu[i] @ p[:d] + 0.5 * np.trace(s @ s.T @ Qxx) + a @ c + 0.5 * qmm * (a @ a)
        val = -float(gen)
        if val < best_val - TIE_TOL * (1.0 + abs(best_val)) or best is None:
            best_val, best = val, (u.copy(), np.asarray(a, dtype=float))
    return best_val, best


def hamiltonian_state(spec: ProblemSpec, params: HamiltonianParams, x, p, Q, t: float = 0.0):
    """``Hbar(x, p, Q) = inf_u -(mu . p + 1/2 tr(sigma sigma^T Q))``; returns ``(value, u)``."""
    d = spec.dim
    x = np.asarray(x, dtype=float).reshape(d)
    p = np.asarray(p, dtype=float).reshape(d)
    Q = np.asarray(Q, dtype=float).reshape(d, d)
    us = params.u_grid(spec)
    mu = spec.mu(x[None, :], us, t)
    sg = spec.sigma(x[None, :], us, t)
    gen = mu @ p + 0.5 * np.einsum("nij,nkj,ik->n", sg, sg, Q)
    vals = -gen
    best = float(vals.min())
    i = int(np.argmax(vals <= best + TIE_TOL * (1.0 + abs(best))))
    return float(vals[i]), us[i].copy()
