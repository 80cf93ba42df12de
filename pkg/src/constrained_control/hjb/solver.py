"""Explicit monotone schemes for the floor, constrained and state-constrained problems.

Every discrete control ``c`` yields a sparse nonnegative read matrix ``P_c``
with row sums ``r_c``; the discrete generator is ``L_c V = P_c V - r_c V``
and one explicit step is ``V <- V + h max_c L_c V`` (``min`` for the floor).

Drift is upwinded.  A diffusion column ``w`` (a column of ``sigma``,
extended by the matching ``a`` component on the m axis) contributes
``(V(z + c w) + V(z - c w) - 2 V(z)) / (2 c^2)``.  When ``w`` is
axis-aligned, ``c`` is chosen so that the reads fall on neighbouring nodes
(the usual three-point stencil).  Otherwise the stencil is widened to
``c = J min_i h_i / |w_i|`` with ``J = ceil(kappa / sqrt(h))`` and read by
multilinear interpolation, which keeps the scheme monotone for degenerate
correlated diffusions such as ``(sigma, a)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from ..model import ProblemSpec, SpecError
from .grid import NEG_INF, Grid, PolicyField, ValueField
from .hamiltonian import TIE_TOL, HamiltonianParams

READ_TOL = 1e-9
DOMAIN_TOL = 1e-9

__all__ = [
    "CFLError",
    "GridBudgetError",
    "solve_constraint_floor",
    "solve_expectation_constrained",
    "solve_state_constrained",
    "solve_unconstrained",
    "extract_policy",
]


class CFLError(RuntimeError):
    """Time step too large for the explicit scheme; ``dt_max`` is admissible."""

    def __init__(self, h_t, dt_max):
        super().__init__(f"time step {h_t:.3g} exceeds the monotone bound {dt_max:.3g}")
        self.h_t = h_t
        self.dt_max = dt_max


class GridBudgetError(ValueError):
    pass


# --------------------------------------------------------------------------
# stencil assembly


@dataclass
class _Geom:
    lowers: tuple
    spacings: tuple
    sizes: tuple
    extrap_dims: tuple
    points: np.ndarray

    @classmethod
    def of(cls, grid: Grid, boundary: str):
        extrap = tuple(range(grid.dim)) if boundary == "extrapolate" else ()
        lowers = grid.x_lower + ((grid.m_lower,) if grid.has_m else ())
        return cls(lowers, grid.spacings, grid.state_shape, extrap, grid.state_points())

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def D(self):
        return self.points.shape[1]


def _corners(geom: _Geom, q):
    """Flat indices and weights (n, 2^D) of multilinear reads at q.

    Coordinates are clamped to the box except on extrapolated axes, where
    the outermost cell's linear function is continued.
    """
    base, frac = [], []
    for k in range(geom.D):
        size = geom.sizes[k]
        f = (q[:, k] - geom.lowers[k]) / geom.spacings[k]
        fr = np.rint(f)
        f = np.where(np.abs(f - fr) < 1e-9, fr, f)
        if k not in geom.extrap_dims:
            f = np.clip(f, 0.0, size - 1)
        i0 = np.clip(np.floor(f), 0, size - 2).astype(np.int64)
        base.append(i0)
        frac.append(f - i0)
    idx, wts = [], []
    for corner in itertools.product((0, 1), repeat=geom.D):
        w = np.ones(len(q))
        for k, c in enumerate(corner):
            w = w * (frac[k] if c else 1.0 - frac[k])
        idx.append(np.ravel_multi_index(tuple(b + c for b, c in zip(base, corner)), geom.sizes))
        wts.append(w)
    return np.stack(idx, axis=1), np.stack(wts, axis=1)


def _drift_reads(geom: _Geom, mu):
    """Upwind reads for drift ``mu`` (n, d) on the first d axes."""
    reads = []
    for k in range(mu.shape[1]):
        m = mu[:, k]
        q = geom.points.copy()
        q[:, k] += np.sign(m) * geom.spacings[k]
        reads.append((q, np.abs(m) / geom.spacings[k]))
    return reads


def _diffusion_reads(geom: _Geom, cols, J):
    """Reads for diffusion columns; ``cols`` is a list of (n, D) arrays."""
    reads = []
    h = np.asarray(geom.spacings)
    for w in cols:
        aw = np.abs(w)
        nz = aw > 1e-14
        with np.errstate(divide="ignore"):
            ratio = np.where(nz, h[None, :] / np.where(nz, aw, 1.0), np.inf)
        cmin = ratio.min(axis=1)
        active = np.isfinite(cmin)
        jj = np.where(nz.sum(axis=1) <= 1, 1.0, float(J))
        c = np.where(active, jj * np.where(active, cmin, 1.0), 1.0)
        coef = np.where(active, 0.5 / c ** 2, 0.0)
        shift = c[:, None] * w
        reads.append((geom.points + shift, coef))
        reads.append((geom.points - shift, coef))
    return reads


@dataclass
class _Ops:
    """Stacked operators for C controls over n nodes."""

    S: sp.csr_matrix  # (C n, n)
    pattern: sp.csr_matrix  # off-diagonal read pattern
    rate: np.ndarray  # (C, n)
    diag: np.ndarray  # (C, n)
    static_ok: np.ndarray  # (C, n)

    @property
    def C(self):
        return self.rate.shape[0]

    def generator(self, W):
        n = W.shape[0]
        return (self.S @ W).reshape(self.C, n) - self.rate * W

    def reads_any(self, flags):
        n = flags.shape[0]
        return (self.pattern @ flags.astype(float)).reshape(self.C, n) > 0


def _assemble(geom: _Geom, per_control_reads, domain=None):
    n = geom.n
    rows, cols, vals = [], [], []
    rate = np.zeros((len(per_control_reads), n))
    ok = np.ones((len(per_control_reads), n), dtype=bool)
    d = None
    for ci, reads in enumerate(per_control_reads):
        for q, coef in reads:
            live = coef > 0
            if not np.any(live):
                continue
            if domain is not None:
                d = domain.dim
                ok[ci] &= ~(live & (domain.delta(q[:, :d]) < -DOMAIN_TOL))
            idx, w = _corners(geom, q)
            v = coef[:, None] * w
            keep = np.abs(v) > 1e-300
            r = np.broadcast_to(np.arange(n)[:, None], idx.shape)
            rows.append((r[keep] + ci * n))
            cols.append(idx[keep])
            vals.append(v[keep])
            rate[ci] += coef
    C = len(per_control_reads)
    if rows:
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        rows = cols = np.zeros(0, dtype=np.int64)
        vals = np.zeros(0)
    S = sp.csr_matrix((vals, (rows, cols)), shape=(C * n, n))
    S.sum_duplicates()
    S.eliminate_zeros()
    coo = S.tocoo()
    self_read = coo.col == (coo.row % n)
    diag = np.zeros(C * n)
    np.add.at(diag, coo.row[self_read], coo.data[self_read])
    off = ~self_read
    pattern = sp.csr_matrix(
        (np.ones(int(off.sum())), (coo.row[off], coo.col[off])), shape=(C * n, n)
    )
    return _Ops(S, pattern, rate, diag.reshape(C, n), ok)


def _stencil_J(grid: Grid, kappa: float) -> int:
    href = max(grid.spacings)
    return max(1, int(math.ceil(kappa / math.sqrt(href))))


# --------------------------------------------------------------------------
# problem descriptions


@dataclass
class _Part:
    ops: _Ops
    labels: np.ndarray  # (C, k) control values (u, or a, or u|a)


@dataclass
class _Setup:
    grid: Grid
    params: HamiltonianParams
    sense: str  # "max" | "min"
    parts_at: Callable[[float], list]
    terminal: np.ndarray  # state_shape values (finite fill)
    readable: Optional[Callable[[int], np.ndarray]] = None  # flat bool
    edge: Optional[Callable[[int], np.ndarray]] = None  # flat floor values
    masked: Optional[Callable[[int], np.ndarray]] = None  # flat bool
    node_masked: Optional[np.ndarray] = None  # static mask (state domain)


def _check_budget(grid, params, n_controls):
    if grid.n_nodes > params.max_nodes or np.prod(grid.state_shape) * n_controls > params.max_nodes:
        raise GridBudgetError(
            f"grid with {grid.n_nodes} nodes and {n_controls} controls exceeds the budget {params.max_nodes}"
        )


def _x_points(grid: Grid):
    pts = grid.state_points()
    return pts[:, : grid.dim]


def _x_parts(spec, grid, params, with_domain):
    """Per-u operators for problems on the (t, x) grid."""
    geom = _Geom.of(grid, params.boundary)
    J = _stencil_J(grid, params.stencil_kappa)
    us = params.u_grid(spec)
    _check_budget(grid, params, len(us))
    x = geom.points
    cache = {}

    def parts(t):
        key = round(float(t), 12) if spec.depends_on_time() else None
        if key in cache:
            return cache[key]
        reads = []
        for u in us:
            mu = spec.mu(x, u[None, :], t)
            sg = spec.sigma(x, u[None, :], t)
            cols = [sg[:, :, j] for j in range(spec.dim)]
            reads.append(_drift_reads(geom, mu) + _diffusion_reads(geom, cols, J))
        out = [_Part(_assemble(geom, reads, spec.domain if with_domain else None), us)]
        cache.clear()
        cache[key] = out
        return out

    return parts


def _xm_parts(spec, grid, params):
    """Operators for the augmented (x, m) problem.

    When sigma does not depend on u the Hamiltonian splits into a drift part
    (max over u) and a diffusion part (max over a); otherwise all (u, a)
    pairs are enumerated.
    """
    geom = _Geom.of(grid, params.boundary)
    J = _stencil_J(grid, params.stencil_kappa)
    d = spec.dim
    us = params.u_grid(spec)
    As = params.a_grid(d)
    separable = not spec.sigma_depends_on_control()
    _check_budget(grid, params, len(us) + len(As) if separable else len(us) * len(As))
    x = geom.points[:, :d]
    cache = {}

    def drift_reads(mu):
        full = np.zeros((geom.n, geom.D))
        full[:, :d] = mu
        return _drift_reads(geom, full[:, :d])

    def diff_cols(sg, a):
        cols = []
        for j in range(d):
            w = np.empty((geom.n, geom.D))
            w[:, :d] = sg[:, :, j]
            w[:, d] = a[j]
            cols.append(w)
        return cols

    def parts(t):
        key = round(float(t), 12) if spec.depends_on_time() else None
        if key in cache:
            return cache[key]
        if separable:
            dr = [drift_reads(spec.mu(x, u[None, :], t)) for u in us]
            sg = spec.sigma(x, us[:1], t)
            df = [_diffusion_reads(geom, diff_cols(sg, a), J) for a in As]
            out = [_Part(_assemble(geom, dr), us), _Part(_assemble(geom, df), As)]
        else:
            reads, labels = [], []
            for u in us:
                mu = spec.mu(x, u[None, :], t)
                sg = spec.sigma(x, u[None, :], t)
                base = drift_reads(mu)
                for a in As:
                    reads.append(base + _diffusion_reads(geom, diff_cols(sg, a), J))
                    labels.append(np.concatenate([u, a]))
            out = [_Part(_assemble(geom, reads), np.array(labels))]
        cache.clear()
        cache[key] = out
        return out

    return parts, separable


# --------------------------------------------------------------------------
# sweep


def _best(part: _Part, G, ok, sense):
    """Best generator value and its first (tie-tolerant) index per node."""
    big = -np.inf if sense == "max" else np.inf
    Gm = np.where(ok, G, big)
    best = Gm.max(axis=0) if sense == "max" else Gm.min(axis=0)
    tol = TIE_TOL * (1.0 + np.abs(best))
    hit = Gm >= best - tol if sense == "max" else Gm <= best + tol
    idx = np.argmax(hit, axis=0)
    return best, idx


def _validity(part: _Part, unreadable):
    ok = part.ops.static_ok.copy()
    if unreadable is not None and np.any(unreadable):
        ok &= ~part.ops.reads_any(unreadable)
    none = ~ok.any(axis=0)
    if np.any(none):
        ok[:, none] = part.ops.static_ok[:, none]
    frozen = ~ok.any(axis=0)
    return ok, frozen


def _dt_max(parts, params):
    total = 0.0
    per_node = None
    for p in parts:
        r = np.clip(p.ops.rate - p.ops.diag, 0.0, None).max(axis=0)
        per_node = r if per_node is None else per_node + r
    total = float(per_node.max()) + params.rho if per_node is not None else params.rho
    return np.inf if total <= 0 else params.cfl / total


def _extend_down(W, readable, shape, edge=None):
    """Monotone extension below the readable set along the last axis.

    Unreadable nodes take the lowest readable value of their column, capped
    by ``edge`` (the value on the floor) when given.
    """
    Wr = W.reshape(shape)
    R = readable.reshape(shape)
    any_ = R.any(axis=-1, keepdims=True)
    j0 = np.argmax(R, axis=-1)[..., None]
    low = np.take_along_axis(Wr, j0, axis=-1)
    if edge is None:
        fill = np.where(any_, low, Wr)
    else:
        e = edge.reshape(shape)
        fill = np.where(any_, np.minimum(low, e), e)
    return np.where(R, Wr, fill).reshape(-1)


def _monotone_in_m(W, readable, shape):
    """Running max along the m axis over readable nodes.

    The exact value is nondecreasing in m; near the moving floor the
    stencil can break this by a fraction of a cell.  The running max is
    itself monotone and commutes with constants, so the scheme keeps both
    properties.  Returns the repaired values and the largest raise.
    """
    Wr = np.where(readable, W, -np.inf).reshape(shape)
    up = np.maximum.accumulate(Wr, axis=-1).reshape(-1)
    out = np.where(readable, up, W)
    raise_ = float(np.max(out - W, initial=0.0, where=readable))
    return out, raise_


def _step_values(parts, W, oks, frozen, sense, rho):
    total = np.zeros_like(W)
    idxs = []
    for p, ok in zip(parts, oks):
        G = p.ops.generator(W)
        b, idx = _best(p, G, ok, sense)
        total += np.where(frozen, 0.0, b)
        idxs.append(idx)
    return total - rho * W, idxs


def _edge(setup, step):
    return None if setup.edge is None else setup.edge(step)


def _sweep(setup: _Setup):
    grid, params = setup.grid, setup.params
    nt = grid.nt
    times = grid.times
    n = int(np.prod(grid.state_shape))
    values = np.empty((nt + 1, n))
    pol_idx = None
    W = setup.terminal.reshape(-1).astype(float).copy()
    values[nt] = W
    stats = {"substeps": 0, "frozen_nodes": 0, "fallback_nodes": 0}
    if setup.readable is not None:
        stats["m_monotone_repair"] = 0.0
    for step in range(nt - 1, -1, -1):
        parts = setup.parts_at(times[step + 1])
        if pol_idx is None:
            pol_idx = [np.zeros((nt + 1, n), dtype=np.int64) for _ in parts]
        n_sub = _n_substeps(parts, grid, params)
        hs = grid.h_t / n_sub
        readable = setup.readable(step + 1) if setup.readable is not None else None
        unreadable = None if readable is None else ~readable
        edge_next = _edge(setup, step + 1)
        oks, frozen = [], np.zeros(n, dtype=bool)
        for p in parts:
            ok, fz = _validity(p, unreadable)
            oks.append(ok)
            frozen |= fz
        if setup.node_masked is not None:
            frozen |= setup.node_masked
        stats["frozen_nodes"] = max(stats["frozen_nodes"], int(frozen.sum()))
        for s in range(n_sub):
            incr, idxs = _step_values(parts, W, oks, frozen, setup.sense, params.rho)
            if s == 0:
                for k, idx in enumerate(idxs):
                    pol_idx[k][step] = idx
                    if step == nt - 1:
                        pol_idx[k][nt] = idx
            W = W + hs * incr
            if readable is not None:
                W, lift = _monotone_in_m(W, readable, grid.state_shape)
                stats["m_monotone_repair"] = max(stats["m_monotone_repair"], lift)
                W = _extend_down(W, readable, grid.state_shape, edge_next)
        stats["substeps"] += n_sub
        if setup.readable is not None:
            W = _extend_down(W, setup.readable(step), grid.state_shape, _edge(setup, step))
        values[step] = W
    stats["substeps_per_step"] = stats["substeps"] / max(nt, 1)
    return values, pol_idx, stats


def _finalise(setup, values):
    grid = setup.grid
    masked = np.zeros(values.shape, dtype=bool)
    for step in range(grid.nt + 1):
        if setup.masked is not None:
            masked[step] = setup.masked(step)
        if setup.node_masked is not None:
            masked[step] |= setup.node_masked
    vals = np.where(masked, NEG_INF, values)
    return vals.reshape(grid.shape), masked.reshape(grid.shape)


def _policy(setup, parts0, pol_idx, separable, d):
    grid = setup.grid
    shape = grid.shape
    if len(parts0) == 2:
        u = parts0[0].labels[pol_idx[0]]
        a = parts0[1].labels[pol_idx[1]]
    else:
        lab = parts0[0].labels[pol_idx[0]]
        if grid.has_m:
            u, a = lab[..., :-d], lab[..., -d:]
        else:
            u, a = lab, None
    u = u.reshape(shape + (u.shape[-1],))
    a = None if a is None else a.reshape(shape + (d,))
    return PolicyField(grid, u, a, tie_break="lexicographic")


# --------------------------------------------------------------------------
# public solvers


def _require_x_grid(grid: Grid, spec: ProblemSpec):
    if grid.dim != spec.dim:
        raise SpecError(f"grid has {grid.dim} x axes, problem has d={spec.dim}")


def _field_meta(kind, spec, params, stats, **extra):
    meta = {"equation": kind, "problem": spec.name, "A": params.A, "a_points": params.a_points,
            "u_points": params.u_points or spec.controls.points_per_axis, "rho": params.rho,
            "boundary": params.boundary, **stats}
    meta.update(extra)
    return meta


def solve_constraint_floor(spec: ProblemSpec, grid: Grid, params: HamiltonianParams = HamiltonianParams()) -> ValueField:
    """Minimal reachable constraint level ``v(t, x) = inf E g(X_T)``."""
    _require_x_grid(grid, spec)
    grid = grid.x_grid() if grid.has_m else grid
    x = _x_points(grid)
    setup = _Setup(grid, params, "min", _x_parts(spec, grid, params, False), spec.g(x))
    values, _, stats = _sweep(setup)
    vals, masked = _finalise(setup, values)
    return ValueField(grid, vals, masked, "floor", _field_meta("floor", spec, params, stats))


def _state_setup(spec, grid, params, with_domain):
    _require_x_grid(grid, spec)
    if grid.has_m:
        grid = grid.x_grid()
    x = _x_points(grid)
    node_masked = None
    if with_domain and spec.domain is not None:
        node_masked = spec.domain.delta(x) < -DOMAIN_TOL
        if not np.any(spec.domain.delta(x) > 0):
            raise SpecError("grid has no node inside the state domain")
    term = spec.f(x).copy()
    if node_masked is not None:
        term[node_masked] = 0.0
    parts = _x_parts(spec, grid, params, with_domain and spec.domain is not None)
    return _Setup(grid, params, "max", parts, term, node_masked=node_masked)


def solve_state_constrained(spec: ProblemSpec, grid: Grid, params: HamiltonianParams = HamiltonianParams()):
    """State-constrained value on the closure of the domain.

    Nodes outside the closure are masked; at the remaining nodes only
    controls whose stencil stays in the closure are searched.  No boundary
    data is imposed.  Returns ``(field, policy)``.
    """
    setup = _state_setup(spec, grid, params, True)
    values, pol_idx, stats = _sweep(setup)
    vals, masked = _finalise(setup, values)
    kind = "state" if spec.domain is not None else "unconstrained"
    field = ValueField(setup.grid, vals, masked, kind, _field_meta(kind, spec, params, stats))
    return field, _policy(setup, setup.parts_at(setup.grid.T), pol_idx, True, spec.dim)


def solve_unconstrained(spec: ProblemSpec, grid: Grid, params: HamiltonianParams = HamiltonianParams()):
    """Plain HJB ``sup_u E f(X_T)`` ignoring any domain; returns ``(field, policy)``."""
    setup = _state_setup(spec, grid, params, False)
    values, pol_idx, stats = _sweep(setup)
    vals, masked = _finalise(setup, values)
    field = ValueField(setup.grid, vals, masked, "unconstrained", _field_meta("unconstrained", spec, params, stats))
    return field, _policy(setup, setup.parts_at(setup.grid.T), pol_idx, True, spec.dim)


def _n_substeps(parts, grid, params):
    dt = _dt_max(parts, params)
    if grid.h_t > dt * (1 + 1e-12):
        if params.cfl_mode == "strict":
            raise CFLError(grid.h_t, dt)
        return int(math.ceil(grid.h_t / dt))
    return 1


def floor_edge_values(spec: ProblemSpec, floor: ValueField, params: HamiltonianParams = HamiltonianParams()):
    """Reward collected on the floor, ``E f(X_T)`` under floor-optimal controls.

    Where several controls attain the floor's discrete minimum the one with
    the larger reward is used.  Returns an array of shape ``floor.grid.shape``.
    """
    xgrid = floor.grid
    parts_at = _x_parts(spec, xgrid, params, False)
    nt, times = xgrid.nt, xgrid.times
    n = int(np.prod(xgrid.state_shape))
    v = floor.values.reshape(nt + 1, n)
    W = spec.f(_x_points(xgrid)).astype(float).copy()
    out = np.empty((nt + 1, n))
    out[nt] = W
    for step in range(nt - 1, -1, -1):
        parts = parts_at(times[step + 1])
        ops = parts[0].ops
        n_sub = _n_substeps(parts, xgrid, params)
        hs = xgrid.h_t / n_sub
        Gv = ops.generator(v[step + 1])
        tie = Gv <= Gv.min(axis=0) + 1e-9 * (1.0 + np.abs(Gv).max(axis=0))
        for _ in range(n_sub):
            Gw = np.where(tie, ops.generator(W), -np.inf).max(axis=0)
            W = W + hs * (Gw - params.rho * W)
        out[step] = W
    return out.reshape(xgrid.shape)


def _constrained_setup(spec, grid, params, floor):
    if not grid.has_m:
        raise ValueError("the constrained problem needs a grid with an m axis")
    _require_x_grid(grid, spec)
    if floor is None:
        floor = solve_constraint_floor(spec, grid.x_grid(), params)
    if floor.grid != grid.x_grid():
        raise ValueError("floor must live on the same (t, x) grid")
    margin = params.mask_margin if params.mask_margin is not None else grid.h_m
    mvals = grid.m_axis
    nx = int(np.prod(grid.nx))
    vfl = floor.values.reshape(grid.nt + 1, nx)
    mm = np.broadcast_to(mvals[None, :], (nx, grid.nm))

    def readable(step):
        return (mm >= vfl[step][:, None] - READ_TOL).reshape(-1)

    def masked(step):
        return (mm < vfl[step][:, None] - margin).reshape(-1)

    wfl = floor_edge_values(spec, floor, params).reshape(grid.nt + 1, nx)

    def edge(step):
        return np.broadcast_to(wfl[step][:, None], (nx, grid.nm)).reshape(-1)

    # terminal: feasible iff g(x) <= m, and V = f there
    term = edge(grid.nt).copy()
    parts, separable = _xm_parts(spec, grid, params)
    setup = _Setup(grid, params, "max", parts, term, readable=readable, masked=masked, edge=edge)
    return setup, separable, floor, margin


def solve_expectation_constrained(
    spec: ProblemSpec, grid: Grid, params: HamiltonianParams = HamiltonianParams(), floor: Optional[ValueField] = None
):
    """Value ``V(t, x, m)`` of ``sup E f`` subject to ``E g <= m``.

    Returns ``(field, policy, floor)``.  Nodes with ``m < v - margin`` are
    masked; nodes between that and the floor copy the lowest value above
    the floor in their column.  Each substep ends with a running max along
    m; ``meta["m_monotone_repair"]`` records the largest raise it applied.
    """
    setup, separable, floor, margin = _constrained_setup(spec, grid, params, floor)
    values, pol_idx, stats = _sweep(setup)
    vals, masked = _finalise(setup, values)
    meta = _field_meta("constrained", spec, params, stats, mask_margin=margin, separable=separable)
    if not np.any(~masked):
        meta["empty_domain"] = True
    field = ValueField(grid, vals, masked, "constrained", meta)
    return field, _policy(setup, setup.parts_at(grid.T), pol_idx, separable, spec.dim), floor


def extract_policy(field: ValueField, spec: ProblemSpec, params: HamiltonianParams = HamiltonianParams(),
                   floor: Optional[ValueField] = None) -> PolicyField:
    """Per-node maximiser of the discrete generator applied to the next slice.

    On the last slice the terminal values are used.  Ties go to the first
    control in lexicographic order (a-values ordered by (|a|, a)).
    """
    if np.all(field.masked):
        raise ValueError("field is masked everywhere")
    grid = field.grid
    if field.kind == "constrained":
        setup, separable, _, _ = _constrained_setup(spec, grid, params, floor)
    elif field.kind == "floor":
        setup = _Setup(grid, params, "min", _x_parts(spec, grid, params, False), None)
        separable = True
    else:
        setup = _state_setup(spec, grid, params, field.kind == "state")
        separable = True
    n = int(np.prod(grid.state_shape))
    vals = field.values.reshape(grid.nt + 1, n)
    pol_idx = None
    for step in range(grid.nt, -1, -1):
        src = min(step + 1, grid.nt)
        parts = setup.parts_at(grid.times[src])
        if pol_idx is None:
            pol_idx = [np.zeros((grid.nt + 1, n), dtype=np.int64) for _ in parts]
        W = np.where(np.isfinite(vals[src]), vals[src], 0.0)
        readable = setup.readable(src) if setup.readable is not None else None
        if readable is not None:
            W = _extend_down(W, readable, grid.state_shape, _edge(setup, src))
        unreadable = None if readable is None else ~readable
        for k, p in enumerate(parts):
            ok, _ = _validity(p, unreadable)
            _, idx = _best(p, p.ops.generator(W), ok, setup.sense)
            pol_idx[k][step] = idx
    return _policy(setup, setup.parts_at(grid.T), pol_idx, separable, spec.dim)
