"""Monte Carlo checks of the weak dynamic programming principle.

Test functions are grid interpolations of a solved value field shifted by
one m-cell: ``V(., m + h_m)`` lies above the value and ``V(., m - h_m)``
below it, up to interpolation error that the verdict absorbs through the
``2 h`` allowance.  Both sides of every inequality are estimated on the
same Brownian paths.
"""

from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .hjb.grid import PolicyField, ValueField
from .hjb.hamiltonian import HamiltonianParams
from .model import ProblemSpec, SpecError, linear_growth_ok
from .reports import FAIL, INCONCLUSIVE, PASS, VerificationReport, decide
from .sde import (
    Constant,
    Feedback,
    GridFeedback,
    MartingaleProgram,
    Program,
    StopRule,
    TimeGrid,
    sample_mean_se,
    simulate_paths,
    stopping_index,
    switch_to_feedback,
)

INVARIANCE_LEVEL = 0.999
DISCRETE_TAU_NOTE = "stopping times are node-valued, so countable and general stopping-time hypotheses coincide"


@dataclass(eq=False)
class TestFixture:
    """A problem together with its solved fields and candidate controls."""

    __test__ = False

    spec: ProblemSpec
    params: HamiltonianParams = HamiltonianParams()
    value: Optional[ValueField] = None
    floor: Optional[ValueField] = None
    state_value: Optional[ValueField] = None
    policy: Optional[PolicyField] = None
    state_policy: Optional[PolicyField] = None
    candidates: tuple = ()
    probes: tuple = ()

    def __post_init__(self):
        for f in (self.value, self.floor, self.state_value):
            if f is not None and f.meta.get("problem", self.spec.name) != self.spec.name:
                raise ValueError("field and problem do not match")

    @property
    def grid_error(self) -> float:
        fld = self.value if self.value is not None else self.state_value
        return 0.0 if fld is None else float(max(fld.grid.spacings))

    def fingerprint(self) -> str:
        h = hashlib.sha256(repr(self.spec).encode())
        for f in (self.value, self.floor, self.state_value):
            if f is not None:
                h.update(np.ascontiguousarray(f.values).tobytes())
        return h.hexdigest()[:16]


def _time_grid(field_grid, t, T, n_steps):
    if n_steps is None:
        n_steps = max(1, int(round((T - t) / field_grid.h_t)))
    return TimeGrid(float(t), float(T), int(n_steps))


def _split(point, d, with_m=True):
    p = np.asarray(point, dtype=float).ravel()
    t = float(p[0])
    x = p[1:1 + d]
    m = float(p[1 + d]) if with_m else None
    return t, x, m


def _at_stop(bundle, idx):
    rows = np.arange(bundle.n_paths)
    s = bundle.grid.nodes[idx]
    return s, bundle.X[rows, idx], bundle.M[rows, idx], bundle.Y[rows, idx]


FEAS_TOL = 1e-9


def _terminal_value(spec, X, M, Y, lenient=0.0):
    g = spec.g(X, y=Y)
    return np.where(g <= M + FEAS_TOL + lenient, spec.f(X), -np.inf)


def _mean_with_neg_inf(v):
    if np.any(v == -np.inf):
        return -math.inf, 0.0
    return sample_mean_se(v)


def check_dpp_upper(fixture: TestFixture, point, nu: Program, alpha: Optional[MartingaleProgram], tau: StopRule,
                    n_paths: int = 100_000, seed: int = 0, n_steps: Optional[int] = None) -> VerificationReport:
    """``F(t, x; nu) <= E phi(tau, X_tau, M_tau)`` with ``phi = V(., m + h_m)``."""
    spec, V = fixture.spec, fixture.value
    t, x, m = _split(point, spec.dim)
    grid = _time_grid(V.grid, t, spec.horizon, n_steps)
    b = simulate_paths(spec, t, x, m, math.inf, nu, alpha, grid, n_paths, seed)
    XT, MT, YT = b.X[:, -1], b.M[:, -1], b.Y[:, -1]
    gT = spec.g(XT, y=YT)
    mg, sg = sample_mean_se(gT)
    base = dict(name="dpp_upper", point=tuple(np.ravel(point)), n_paths=n_paths, seeds=(seed,))
    pre = {"mean_g": mg, "se_g": sg, "min_M_minus_g": float(np.min(MT - gT))}
    if mg > m + 2 * sg + 1e-12 or np.any(MT < gT - FEAS_TOL):
        return VerificationReport(estimate=math.nan, se=math.nan, slack=math.nan, verdict=INCONCLUSIVE,
                                  notes=["inadmissible input"], extra={"precondition": pre}, **base)
    F = spec.f(XT)
    idx = stopping_index(b, tau)
    s, X, M, Y = _at_stop(b, idx)
    at_T = idx == grid.steps
    phi = np.empty(n_paths)
    phi[at_T] = _terminal_value(spec, X[at_T], M[at_T], Y[at_T])
    if np.any(~at_T):
        phi[~at_T] = V.interp(s[~at_T], X[~at_T], M[~at_T] + V.grid.h_m)
    diff = phi - F
    if np.any(diff == -np.inf):
        slack, se = -math.inf, 0.0
    else:
        slack, se = sample_mean_se(diff)
    h = fixture.grid_error
    est, _ = sample_mean_se(F)
    notes = [DISCRETE_TAU_NOTE]
    if np.any(b.divergent):
        notes.append(f"{int(b.divergent.sum())} divergent paths")
    return VerificationReport(estimate=est, se=se, slack=slack, verdict=decide(slack, se, h), notes=notes,
                              extra={"precondition": pre, "mean_phi": float(np.mean(phi)), "h": h,
                                     "mean_tau": float(np.mean(s))}, **base)


def check_dpp_lower(fixture: TestFixture, point, delta: float, nu: Program, alpha: Optional[MartingaleProgram],
                    tau: StopRule, n_paths: int = 100_000, seed: int = 0,
                    n_steps: Optional[int] = None) -> VerificationReport:
    """``V(t, x, m + delta) >= E phi(tau, X_tau, M_tau)`` with ``phi = V(., m - h_m)``.

    ``nu`` need not be admissible; it is enough that ``(tau, X_tau, M_tau)``
    stays in the unmasked region, which is checked on the sample.
    """
    spec, V = fixture.spec, fixture.value
    t, x, m = _split(point, spec.dim)
    if not np.isfinite(V.at(t, x, m)):
        raise ValueError("point is masked in the solved field")
    grid = _time_grid(V.grid, t, spec.horizon, n_steps)
    b = simulate_paths(spec, t, x, m, math.inf, nu, alpha, grid, n_paths, seed)
    idx = stopping_index(b, tau)
    s, X, M, Y = _at_stop(b, idx)
    at_T = idx == grid.steps
    base = dict(name="dpp_lower", point=tuple(np.ravel(point)), n_paths=n_paths, seeds=(seed,), delta=delta)
    inside = np.empty(n_paths, dtype=bool)
    phi = np.empty(n_paths)
    if np.any(at_T):
        margin = V.meta.get("mask_margin", V.grid.h_m)
        inside[at_T] = np.isfinite(_terminal_value(spec, X[at_T], M[at_T], Y[at_T], lenient=margin))
        phi[at_T] = _terminal_value(spec, X[at_T], M[at_T], Y[at_T])
    if np.any(~at_T):
        inside[~at_T] = np.isfinite(V.interp(s[~at_T], X[~at_T], M[~at_T]))
        phi[~at_T] = V.interp(s[~at_T], X[~at_T], M[~at_T] - V.grid.h_m)
    frac = float(inside.mean())
    notes = [DISCRETE_TAU_NOTE]
    if delta == 0:
        notes.append("delta = 0 is a stronger-than-theorem probe")
    if frac < INVARIANCE_LEVEL:
        return VerificationReport(estimate=math.nan, se=math.nan, slack=math.nan, verdict=INCONCLUSIVE,
                                  notes=notes + ["invariance violated"], extra={"inside_fraction": frac}, **base)
    lhs = V.at(t, x, m + delta)
    mphi, se = _mean_with_neg_inf(phi)
    if mphi == -math.inf:
        notes.append("some stopped states fall below the test function's domain")
    slack = lhs - mphi
    h = fixture.grid_error
    return VerificationReport(estimate=mphi, se=se, slack=slack, verdict=decide(slack, se, h), notes=notes,
                              extra={"lhs": lhs, "inside_fraction": frac, "h": h}, **base)


# --------------------------------------------------------------------------
# right-continuity in m


def _assumptions_ok(spec, box):
    lo = [b[0] for b in box]
    hi = [b[1] for b in box]
    return spec.reward_bounded or linear_growth_ok(spec, (lo, hi))


def _field_box(fld: ValueField):
    g = fld.grid
    return list(zip(g.x_lower, g.x_upper))


def _nonincreasing(gaps, tol):
    return all(b <= a + t for a, b, t in zip(gaps, gaps[1:], tol[1:]))


def check_right_continuity(fixture: TestFixture, point, deltas: Sequence[float] = (0.2, 0.1, 0.05, 0.025),
                           n_paths: int = 100_000, seed: int = 0, mode: str = "grid", tol_rc: float = 0.05,
                           base: Optional[Program] = None, n_steps: Optional[int] = None,
                           box=None) -> VerificationReport:
    """Gaps ``V(t, x, m + delta) - V(t, x, m)`` along a decreasing delta sequence.

    ``mode="grid"`` reads the gaps off the solved constrained field at
    ``point = (t, x, m)``.  ``mode="state"`` treats the state constraint at
    ``point = (t, x)``: the gap for ``delta`` is the reward lost when a
    candidate control is switched to the admissible feedback once the
    distance to the boundary falls to the empirical ``2 delta`` quantile of
    its running minimum, an upper bound for the gap of the value.
    """
    spec = fixture.spec
    fld = fixture.value if mode == "grid" else fixture.state_value
    if mode == "state" and (spec.admissible_feedback is None or spec.domain is None):
        raise SpecError("the state-constraint variant needs an admissible feedback law and a domain")
    box = box if box is not None else (_field_box(fld) if fld is not None else None)
    report_base = dict(name="right_continuity", point=tuple(np.ravel(point)), n_paths=0, seeds=(seed,),
                       delta=float(deltas[-1]))
    if box is None or not _assumptions_ok(spec, box):
        return VerificationReport(estimate=math.nan, se=math.nan, slack=math.nan, verdict=INCONCLUSIVE,
                                  notes=["inconclusive: assumptions unmet"], **report_base)
    h = fixture.grid_error
    if mode == "grid":
        t, x, m = _split(point, spec.dim)
        v0 = fld.at(t, x, m)
        gaps = [fld.at(t, x, m + d) - v0 for d in deltas]
        ses = [0.0] * len(gaps)
        extra = {}
    else:
        t, x, _ = _split(point, spec.dim, with_m=False)
        if base is None:
            base = fixture.candidates[0][1] if fixture.candidates else GridFeedback(fixture.state_policy)
        T = spec.horizon
        grid = _time_grid(fld.grid, t, T, n_steps) if fld is not None else TimeGrid(t, T, n_steps or 100)
        ref = simulate_paths(spec, t, x, 0.0, math.inf, base, None, grid, n_paths, seed)
        f_ref = spec.f(ref.X[:, -1])
        y_T = ref.Y[:, -1]
        gaps, ses, eps_list, switched = [], [], [], []
        for d in deltas:
            eps = float(np.quantile(y_T, min(1.0, 2 * d)))
            prog = switch_to_feedback(spec, base, eps)
            b = simulate_paths(spec, t, x, 0.0, math.inf, prog, None, grid, n_paths, seed)
            g, se = sample_mean_se(f_ref - spec.f(b.X[:, -1]))
            gaps.append(g)
            ses.append(se)
            eps_list.append(eps)
            switched.append(float(np.mean(b.Y[:, -1] <= eps)))
        report_base["n_paths"] = n_paths
        extra = {"eps": eps_list, "switched_fraction": switched}
    tol = [2 * h + 3 * s for s in ses]
    monotone = _nonincreasing(gaps, tol)
    final = gaps[-1]
    ok = monotone and final <= tol_rc + 3 * ses[-1]
    extra.update({"deltas": list(deltas), "gaps": gaps, "gap_se": ses, "monotone": monotone, "h": h})
    return VerificationReport(estimate=final, se=ses[-1], slack=tol_rc - final, verdict=PASS if ok else FAIL,
                              extra=extra, **report_base)


# --------------------------------------------------------------------------
# open versus closed state constraint


def _candidate_programs(fixture: TestFixture):
    spec = fixture.spec
    out = []
    if fixture.state_policy is not None:
        out.append(("grid_policy", GridFeedback(fixture.state_policy)))
    if spec.admissible_feedback is not None:
        out.append(("u_hat", Feedback(spec.admissible_feedback)))
    U = spec.controls
    corners = (np.array(list(itertools.product(*zip(U.lower, U.upper)))) if U.kind == "box"
               else np.array(U.points))
    for c in corners:
        out.append((f"const{tuple(float(v) for v in c)}", Constant(c)))
    out.append(("const_mix", Constant(corners.mean(axis=0))))
    for label, p in fixture.candidates:
        out.append((label, p))
    return out


def check_open_closed(fixture: TestFixture, probes, n_paths: int = 20_000, seed: int = 0, t: float = 0.0,
                      tol: float = 0.1, class_r: Optional[VerificationReport] = None,
                      n_steps: Optional[int] = None) -> VerificationReport:
    """Compare the grid value with a Monte Carlo estimate of the closed-constraint value.

    The closed-constraint value at each probe is estimated by the best mean
    reward among candidate controls whose sampled paths never leave the
    closure of the domain.  Probes on the boundary are compared through the
    one-sided limit of the grid field.
    """
    spec, fld = fixture.spec, fixture.state_value
    T = spec.horizon
    grid = _time_grid(fld.grid, t, T, n_steps)
    rows, worst, worst_se = [], 0.0, 0.0
    notes = []
    cands = _candidate_programs(fixture)
    for x in probes:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        on_boundary = spec.domain is not None and float(spec.domain.delta(x[None, :])[0]) <= 0
        vg = fld.at(t, x)
        if on_boundary:
            n = spec.domain.grad_delta(x[None, :])[0]
            n = n / np.linalg.norm(n)
            hx = max(fld.grid.h_x)
            v1, v2 = fld.at(t, x + hx * n), fld.at(t, x + 2 * hx * n)
            ext = 2 * v1 - v2
            rows.append({"x": x.tolist(), "grid": vg, "one_sided_limit": ext, "diff": abs(vg - ext)})
            worst = max(worst, abs(vg - ext))
            continue
        best, best_se, best_label = -math.inf, 0.0, None
        for label, prog in cands:
            b = simulate_paths(spec, t, x, 0.0, math.inf, prog, None, grid, n_paths, seed)
            if spec.domain is not None:
                if np.any(spec.domain.delta(b.X.reshape(-1, spec.dim)) < -1e-12):
                    continue
            mean, se = sample_mean_se(spec.f(b.X[:, -1]))
            if mean > best:
                best, best_se, best_label = mean, se, label
        diff = abs(vg - best)
        rows.append({"x": x.tolist(), "grid": vg, "mc": best, "se": best_se, "policy": best_label, "diff": diff})
        if diff >= worst:
            worst, worst_se = diff, best_se
    slack = tol - worst
    if class_r is not None and not class_r.passed:
        verdict = INCONCLUSIVE
        notes.append("class-R check failed; the equality is not covered")
    else:
        verdict = decide(slack, worst_se)
    return VerificationReport(name="open_closed", point=(t,), estimate=worst, se=worst_se, slack=slack,
                              verdict=verdict, n_paths=n_paths, seeds=(seed,), notes=notes,
                              extra={"probes": rows, "tol": tol})


# --------------------------------------------------------------------------
# admissible inputs


@dataclass(frozen=True, eq=False)
class _Tracking(Program):
    u: tuple
    step: float = 1e-6

    def start(self, spec, n, dim, n_steps=None):
        u = np.broadcast_to(np.asarray(self.u, dtype=float), (n, spec.control_dim))

        def run(i, s, X, M, Y):
            grad = np.empty_like(X)
            for k in range(spec.dim):
                e = np.zeros(spec.dim)
                e[k] = self.step
                grad[:, k] = (spec.g(X + e, y=Y, t=s) - spec.g(X - e, y=Y, t=s)) / (2 * self.step)
            return np.einsum("nij,ni->nj", spec.sigma(X, u, s), grad)

        return run


def tracking_martingale(spec: ProblemSpec, u, bound: float = 2.0) -> MartingaleProgram:
    """Integrand ``sigma(X, u)^T Dg(X)`` for the constant control ``u``.

    With it ``M - g(X)`` has no martingale part, so for affine ``g`` the
    terminal constraint holds pathwise as soon as it holds for the drift.
    """
    return MartingaleProgram(_Tracking(tuple(np.atleast_1d(np.asarray(u, dtype=float)))), bound)


def standard_cases(spec: ProblemSpec, point, n_controls: int = 5, radius: float = 0.4):
    """Constant controls crossed with three stopping rules, for both inequalities.

    Returns ``(side, label, nu, alpha, tau)`` tuples.  Every constant control
    is paired with its tracking martingale; the lower side also runs each
    control with a frozen martingale.
    """
    from .sde import AtTime, ExitRegion, Region, Terminal

    t, x, _ = _split(point, spec.dim)
    T = spec.horizon
    taus = [("half", AtTime(t + (T - t) / 2)),
            ("exit", ExitRegion(Region(x=tuple((xi - radius, xi + radius) for xi in x)))),
            ("terminal", Terminal())]
    controls = spec.controls.grid(n_controls) if spec.controls.kind == "box" else spec.controls.grid()
    out = []
    for u in controls:
        ul = ",".join(f"{v:g}" for v in u)
        for tl, tau in taus:
            out.append(("upper", f"u=({ul}) a=track tau={tl}", Constant(u), tracking_martingale(spec, u), tau))
            out.append(("lower", f"u=({ul}) a=track tau={tl}", Constant(u), tracking_martingale(spec, u), tau))
            out.append(("lower", f"u=({ul}) a=0 tau={tl}", Constant(u), None, tau))
    return out
