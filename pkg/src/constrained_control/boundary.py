"""Numerical checks of the boundary and comparison hypotheses.

* feedback invariance: the closed loop under the admissible feedback never
  leaves the domain;
* the inward curve ``x(eps) - x0`` driven by the inward feedback;
* the sufficient condition for class R: inward drift ``mu . D delta >=
  iota > 0`` and vanishing diffusion near the boundary;
* the regularity inequality of the state-constraint Hamiltonian, checked at
  the extremal matrix pair.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .model import ProblemSpec, SpecError, _dilate
from .reports import FAIL, INCONCLUSIVE, PASS, VerificationReport
from .sde import Constant, Feedback, Program, TimeGrid, simulate_paths

RATIO_LIMIT = 2.0


@dataclass(frozen=True)
class BoundaryProbe:
    x0: tuple
    normal: tuple
    radius: float = 0.02

    @classmethod
    def at(cls, spec: ProblemSpec, x0, radius=0.02, tol=1e-6):
        if spec.domain is None:
            raise SpecError("problem has no domain descriptor")
        x0 = np.asarray(x0, dtype=float).reshape(spec.dim)
        g = spec.domain.grad_delta(x0[None, :])[0]
        norm = np.linalg.norm(g)
        if not norm > tol:
            raise ValueError("gradient of delta vanishes at the probe")
        return cls(tuple(x0), tuple(g / norm), float(radius))


@dataclass(frozen=True)
class InwardCurve:
    eps: tuple
    ell: tuple  # offsets x(eps) - x0, one tuple per sample
    lam: tuple

    def offsets(self) -> np.ndarray:
        return np.array(self.ell)


def _need_domain(spec):
    if spec.domain is None:
        raise SpecError("problem has no domain descriptor")


def check_feedback_invariance(spec: ProblemSpec, probes, n_paths: int = 10_000, steps: int = 100, seed: int = 0,
                              t: float = 0.0, u_hat=None) -> VerificationReport:
    """Fraction of simulated path nodes with ``delta(X) <= 0`` under the feedback."""
    exprs = u_hat if u_hat is not None else spec.admissible_feedback
    if spec.domain is None:
        return VerificationReport("feedback_invariance", (t,), 0.0, 0.0, 0.0, PASS, 0, (seed,),
                                  notes=["no domain: invariance holds vacuously"])
    if exprs is None:
        raise SpecError("problem has no admissible feedback law")
    prog: Program = Feedback(exprs)
    grid = TimeGrid(t, spec.horizon, steps)
    bad, total, rows = 0, 0, []
    for x in probes:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        b = simulate_paths(spec, t, x, 0.0, math.inf, prog, None, grid, n_paths, seed)
        dl = spec.domain.delta(b.X.reshape(-1, spec.dim))
        k = int(np.sum(dl <= 0))
        bad += k
        total += dl.size
        rows.append({"x": x.tolist(), "violations": k})
    frac = bad / total
    return VerificationReport("feedback_invariance", (t,), frac, 0.0, -frac, PASS if bad == 0 else FAIL,
                              n_paths, (seed,), extra={"probes": rows})


def build_inward_curve(spec: ProblemSpec, x0, eps_samples: Sequence[float], u_check=None) -> InwardCurve:
    """Solve ``x' = mu(x, u_check(x))`` from ``x0`` by RK4 with step ``min(eps) / 10``."""
    if u_check is None and spec.inward_feedback is None:
        raise SpecError("problem has no inward feedback law")
    x0 = np.asarray(getattr(x0, "x0", x0), dtype=float).reshape(spec.dim)
    eps = np.sort(np.asarray(eps_samples, dtype=float))
    if eps[0] <= 0:
        raise ValueError("eps samples must be positive")
    law = (lambda z: spec.u_check(z)) if u_check is None else (lambda z: spec._feedback(u_check, z))

    def rhs(z):
        return spec.mu(z[None, :], law(z[None, :]))[0]

    h = eps[0] / 10.0
    x, s, out = x0.copy(), 0.0, []
    for e in eps:
        while s < e - 1e-15:
            dt = min(h, e - s)
            k1 = rhs(x)
            k2 = rhs(x + 0.5 * dt * k1)
            k3 = rhs(x + 0.5 * dt * k2)
            k4 = rhs(x + dt * k3)
            x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            s += dt
            if not np.all(np.isfinite(x)):
                raise FloatingPointError(f"inward curve blew up before eps={e}")
        out.append(tuple(float(v) for v in x - x0))
    return InwardCurve(tuple(eps.tolist()), tuple(out), tuple(eps.tolist()))


def sample_boundary(spec: ProblemSpec, box, n_points: int, seed: int = 0, max_draws: int = 2_000_000):
    """Rejection-sample ``|delta| <= 1e-3 diam`` in the box, then project onto delta = 0."""
    _need_domain(spec)
    lo = np.array([b[0] for b in box], dtype=float)
    hi = np.array([b[1] for b in box], dtype=float)
    tol_b = 1e-3 * float(np.linalg.norm(hi - lo))
    rng = np.random.default_rng(seed)
    found, drawn = [], 0
    while sum(len(f) for f in found) < n_points and drawn < max_draws:
        batch = rng.uniform(lo, hi, size=(100_000, spec.dim))
        drawn += len(batch)
        found.append(batch[np.abs(spec.domain.delta(batch)) <= tol_b])
    pts = np.concatenate(found)[:n_points] if found else np.zeros((0, spec.dim))
    if len(pts) == 0:
        raise ValueError("no boundary points found in the declared box")
    pts = spec.domain.project_to_boundary(pts)
    return pts, tol_b


def check_class_R_sufficient(spec: ProblemSpec, box, n_points: int = 1000, radius: float = 0.02, tol: float = 0.0,
                             seed: int = 0, n_neighbours: int = 16, u_check=None) -> VerificationReport:
    """Sampled ``iota = min mu(z, u(z)) . D delta(y)`` and ``max |sigma(y, u(y))|``.

    ``z`` ranges over a ball of radius ``radius`` around each sampled
    boundary point and ``y`` over the part of that ball in the closure.
    Passes iff the sampled iota is positive and the diffusion is at most
    ``tol``.
    """
    _need_domain(spec)
    if u_check is None and spec.inward_feedback is None:
        raise SpecError("problem has no inward feedback law")
    law = (lambda z: spec.u_check(z)) if u_check is None else (lambda z: spec._feedback(u_check, z))
    pts, tol_b = sample_boundary(spec, box, n_points, seed)
    rng = np.random.default_rng(seed + 1)
    d = spec.dim
    dirs = rng.normal(size=(len(pts), n_neighbours, d))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    rad = radius * rng.uniform(size=(len(pts), n_neighbours, 1)) ** (1.0 / d)
    Z = (pts[:, None, :] + dirs * rad).reshape(-1, d)
    Z = np.concatenate([Z, pts])
    Yc = Z[spec.domain.delta(Z) >= 0]
    # iota: min over z in the ball and y in the ball within the closure,
    # pairing each z with the y's of the same boundary point
    mu_z = spec.mu(Z, law(Z)).reshape(-1, d)
    Zs = Z[: len(pts) * n_neighbours].reshape(len(pts), n_neighbours, d)
    mus = mu_z[: len(pts) * n_neighbours].reshape(len(pts), n_neighbours, d)
    mus = np.concatenate([mus, mu_z[len(pts) * n_neighbours:][:, None, :]], axis=1)
    Ys = np.concatenate([Zs, pts[:, None, :]], axis=1)
    inside = spec.domain.delta(Ys.reshape(-1, d)).reshape(len(pts), -1) >= 0
    grads = spec.domain.grad_delta(Ys.reshape(-1, d)).reshape(Ys.shape)
    prod = np.einsum("pzi,pyi->pzy", mus, grads)
    prod = np.where(inside[:, None, :], prod, np.inf)
    per_point = prod.min(axis=(1, 2))
    iota = float(per_point.min())
    witness_iota = pts[int(np.argmin(per_point))].tolist()
    sg = spec.sigma(Yc, law(Yc))
    snorm = np.sqrt((sg ** 2).sum(axis=(1, 2)))
    sig = float(snorm.max()) if len(snorm) else 0.0
    witness_sigma = Yc[int(np.argmax(snorm))].tolist() if len(snorm) else None
    ok = iota > 0 and sig <= tol
    return VerificationReport("class_R", tuple(np.ravel(box)), iota, 0.0, iota, PASS if ok else FAIL, 0, (seed,),
                              extra={"iota": iota, "sigma": sig, "n_boundary_points": len(pts), "tol_b": tol_b,
                                     "radius": radius, "witness_iota": witness_iota,
                                     "witness_sigma": witness_sigma})


# --------------------------------------------------------------------------
# Hamiltonian regularity


def _regularity_alpha(spec, lo, hi, n, rng, n_max=10.0):
    """Max ratio LHS / RHS over ``n`` sampled tuples with Xi equal to A_n."""
    d = spec.dim
    us = spec.controls.grid()
    x = rng.uniform(lo, hi, size=(n, d))
    step = rng.normal(size=(n, d))
    step *= (rng.uniform(size=(n, 1)) / np.linalg.norm(step, axis=1, keepdims=True))
    y = np.clip(x + step, lo, hi)
    p = rng.normal(size=(n, d))
    q = rng.normal(size=(n, d))
    Q = rng.normal(size=(n, 2 * d, 2 * d))
    Q = 0.5 * (Q + np.transpose(Q, (0, 2, 1)))
    nn = rng.uniform(1.0, n_max, size=n)
    best = np.full(n, -np.inf)
    for u in us:
        ux = np.broadcast_to(u, (n, len(u)))
        mx, my = spec.mu(x, ux), spec.mu(y, ux)
        sx, sy = spec.sigma(x, ux), spec.sigma(y, ux)
        drift = np.einsum("ni,ni->n", mx - my, q) + np.einsum("ni,ni->n", mx, p - q)
        Sig = np.concatenate([sx, sy], axis=1)  # (n, 2d, d) columns Sigma^i
        quad = np.einsum("nki,nkl,nli->n", Sig, Q, Sig)
        spread = nn ** 2 * ((sx - sy) ** 2).sum(axis=(1, 2))
        best = np.maximum(best, drift + 0.5 * (spread + quad))
    dist = np.linalg.norm(x - y, axis=1)
    rhs = (dist * (1 + np.linalg.norm(q, axis=1) + nn ** 2 * dist)
           + (1 + np.linalg.norm(x, axis=1)) * np.linalg.norm(p - q, axis=1)
           + (1 + (x ** 2).sum(axis=1)) * np.linalg.norm(Q, axis=(1, 2)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(rhs > 0, best / rhs, np.where(best > 0, np.inf, 0.0))
    return float(np.max(ratio))


def check_hamiltonian_regularity(spec: ProblemSpec, box, budget: int = 2000, seed: int = 0,
                                 n_max: float = 10.0) -> VerificationReport:
    """Smallest sampled alpha for the regularity inequality, over two half-budgets.

    The first half samples ``x`` in the box, the second in the box dilated
    by a factor 2 about its centre, so that a constant which only holds
    locally shows up as growth between the halves.  Passes iff both
    estimates are finite and their ratio is below 2.
    """
    lo = np.array([b[0] for b in box], dtype=float)
    hi = np.array([b[1] for b in box], dtype=float)
    rng = np.random.default_rng(seed)
    half = max(1, budget // 2)
    a1 = _regularity_alpha(spec, lo, hi, half, rng, n_max)
    lo2, hi2 = _dilate(lo, hi, 2.0)
    a2 = max(a1, _regularity_alpha(spec, lo2, hi2, half, rng, n_max))
    finite = math.isfinite(a1) and math.isfinite(a2)
    ratio = a2 / a1 if finite and a1 > 0 else (1.0 if finite else math.inf)
    ok = finite and ratio < RATIO_LIMIT
    return VerificationReport("hamiltonian_regularity", tuple(np.ravel(box)), a2, 0.0, RATIO_LIMIT - ratio,
                              PASS if ok else FAIL, budget, (seed,),
                              extra={"alpha_half1": a1, "alpha_half2": a2, "ratio": ratio})
