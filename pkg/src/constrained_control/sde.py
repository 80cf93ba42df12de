"""Euler-Maruyama simulation of the augmented state (X, M, Y).

``X`` follows the controlled SDE, ``M = m + int a^T dW`` is the auxiliary
martingale and ``Y`` is the running minimum of the distance to the
complement of the state domain.  All paths of a bundle are simulated in
one vectorised sweep.

Brownian increments are keyed by ``(seed, step)``; path ``i`` uses the
``i``-th normal draw of that step's stream.  A path is therefore identical
whatever the bundle size, and a bundle is reproducible bit for bit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .expr import eval_expression, parse_expression
from .model import ProblemSpec, SpecError

__all__ = [
    "TimeGrid",
    "Region",
    "Immediate",
    "Never",
    "Terminal",
    "AtTime",
    "ExitRegion",
    "YBelow",
    "XCross",
    "Always",
    "NeverEvent",
    "RegionEvent",
    "Constant",
    "TimeTable",
    "Feedback",
    "GridFeedback",
    "Concatenate",
    "ThresholdSwitch",
    "MartingaleProgram",
    "PathBundle",
    "AugmentedPath",
    "brownian_increments",
    "simulate",
    "simulate_paths",
    "concatenate",
    "switch_to_feedback",
    "first_exit",
    "stopping_index",
    "write_paths_csv",
]


def _seed_key(seed: int) -> int:
    return int(seed) & 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class TimeGrid:
    start: float
    end: float
    steps: int

    def __post_init__(self):
        if self.steps < 1 or not self.end > self.start:
            raise ValueError("time grid needs end > start and at least one step")

    @property
    def h(self) -> float:
        return (self.end - self.start) / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return self.start + self.h * np.arange(self.steps + 1)


# --------------------------------------------------------------------------
# regions, stopping rules and events


@dataclass(frozen=True)
class Region:
    """Closed axis-aligned box in (t, x, m) space; ``None`` means unbounded."""

    t: Optional[tuple] = None
    x: Optional[tuple] = None  # sequence of (lo, hi) per coordinate
    m: Optional[tuple] = None

    def contains(self, s, X, M) -> np.ndarray:
        X = np.atleast_2d(X)
        inside = np.ones(X.shape[0], dtype=bool)
        if self.t is not None:
            inside &= (s >= self.t[0]) & (s <= self.t[1])
        if self.x is not None:
            for i, (lo, hi) in enumerate(self.x):
                inside &= (X[:, i] >= lo) & (X[:, i] <= hi)
        if self.m is not None:
            M = np.broadcast_to(M, inside.shape)
            inside &= (M >= self.m[0]) & (M <= self.m[1])
        return inside


class StopRule:
    """A history-measurable stopping rule detected at grid nodes."""

    def hit(self, i, s, X, M, Y, n_steps) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Immediate(StopRule):
    def hit(self, i, s, X, M, Y, n_steps):
        return np.full(len(X), i == 0)


@dataclass(frozen=True)
class Never(StopRule):
    def hit(self, i, s, X, M, Y, n_steps):
        return np.zeros(len(X), dtype=bool)


@dataclass(frozen=True)
class Terminal(StopRule):
    def hit(self, i, s, X, M, Y, n_steps):
        return np.full(len(X), i == n_steps)


@dataclass(frozen=True)
class AtTime(StopRule):
    time: float

    def hit(self, i, s, X, M, Y, n_steps):
        return np.full(len(X), s >= self.time - 1e-12)


@dataclass(frozen=True)
class ExitRegion(StopRule):
    region: Region

    def hit(self, i, s, X, M, Y, n_steps):
        return ~self.region.contains(s, X, M)


@dataclass(frozen=True)
class YBelow(StopRule):
    level: float

    def hit(self, i, s, X, M, Y, n_steps):
        return Y <= self.level


@dataclass(frozen=True)
class XCross(StopRule):
    """First node with ``X[coord] >= level`` (or ``<=`` when ``above`` is False)."""

    level: float
    coord: int = 0
    above: bool = True

    def hit(self, i, s, X, M, Y, n_steps):
        v = X[:, self.coord]
        return v >= self.level if self.above else v <= self.level


class Event:
    def holds(self, s, X, M, Y) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class Always(Event):
    def holds(self, s, X, M, Y):
        return np.ones(len(X), dtype=bool)


@dataclass(frozen=True)
class NeverEvent(Event):
    def holds(self, s, X, M, Y):
        return np.zeros(len(X), dtype=bool)


@dataclass(frozen=True)
class RegionEvent(Event):
    region: Region

    def holds(self, s, X, M, Y):
        return self.region.contains(s, X, M)


# --------------------------------------------------------------------------
# programs


class Program:
    """Non-anticipative decision rule; ``start`` returns a per-bundle runner.

    A runner is called once per step with the node index, node time and the
    current (X, M, Y) of every path and returns an (n, dim) array.
    """

    def start(self, spec: ProblemSpec, n: int, dim: int, n_steps=None):
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(Program):
    value: tuple

    def __init__(self, value):
        object.__setattr__(self, "value", tuple(float(v) for v in np.atleast_1d(value)))

    def start(self, spec, n, dim, n_steps=None):
        out = np.broadcast_to(np.array(self.value, dtype=float), (n, dim))
        return lambda i, s, X, M, Y: out


@dataclass(frozen=True)
class TimeTable(Program):
    """Piecewise constant in time: ``values[j]`` on ``[b_{j-1}, b_j)``."""

    breakpoints: tuple
    values: tuple

    def __init__(self, breakpoints, values):
        bp = tuple(float(b) for b in breakpoints)
        vals = tuple(tuple(float(v) for v in np.atleast_1d(val)) for val in values)
        if len(vals) != len(bp) + 1:
            raise ValueError("time table needs len(values) == len(breakpoints) + 1")
        if any(b2 <= b1 for b1, b2 in zip(bp, bp[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "values", vals)

    def start(self, spec, n, dim, n_steps=None):
        bp = np.array(self.breakpoints)
        vals = np.array(self.values, dtype=float)

        def run(i, s, X, M, Y):
            j = int(np.searchsorted(bp, s + 1e-12, side="right"))
            return np.broadcast_to(vals[j], (n, dim))

        return run


@dataclass(frozen=True)
class Feedback(Program):
    """State feedback given by expressions in ``t, x1..xd, y, m``."""

    exprs: tuple

    def __init__(self, exprs):
        exprs = [exprs] if isinstance(exprs, str) else list(exprs)
        object.__setattr__(
            self, "exprs", tuple(parse_expression(e) if isinstance(e, str) else e for e in exprs)
        )

    def start(self, spec, n, dim, n_steps=None):
        if len(self.exprs) != dim:
            raise SpecError(f"feedback has {len(self.exprs)} components, expected {dim}")

        def run(i, s, X, M, Y):
            env = {"t": s, "y": Y, "m": M}
            for j in range(X.shape[1]):
                env[f"x{j + 1}"] = X[:, j]
            cols = [np.broadcast_to(eval_expression(e, env), (n,)) for e in self.exprs]
            return np.stack(cols, axis=1)

        return run


@dataclass(frozen=True, eq=False)
class GridFeedback(Program):
    """Feedback read from a solved policy field by interpolation."""

    policy: object
    component: str = "u"
    mode: str = "linear"

    def start(self, spec, n, dim, n_steps=None):
        def run(i, s, X, M, Y):
            return self.policy.evaluate(self.component, s, X, M, mode=self.mode)

        return run


@dataclass(frozen=True, eq=False)
class Concatenate(Program):
    """Follow ``base`` up to the stopping node; then ``continuation`` on the event.

    The control applied on the step that starts at the stopping node is
    already the continuation's (the switch happens right after ``tau``).
    """

    base: Program
    continuation: Program
    rule: StopRule
    event: Event = field(default_factory=Always)

    def start(self, spec, n, dim, n_steps=None):
        base = self.base.start(spec, n, dim, n_steps)
        cont = self.continuation.start(spec, n, dim, n_steps)
        decided = np.zeros(n, dtype=bool)
        switched = np.zeros(n, dtype=bool)

        def run(i, s, X, M, Y):
            hit = self.rule.hit(i, s, X, M, Y, n_steps) & ~decided
            if np.any(hit):
                switched[hit] = self.event.holds(s, X[hit], M[hit] if np.ndim(M) else M, Y[hit])
                decided[hit] = True
            ub = base(i, s, X, M, Y)
            uc = cont(i, s, X, M, Y)
            return np.where(switched[:, None], uc, ub)

        return run


def ThresholdSwitch(base: Program, rule: StopRule, continuation: Program) -> Concatenate:
    return Concatenate(base, continuation, rule, Always())


def concatenate(base: Program, continuation: Program, tau: StopRule, gamma: Event = None) -> Program:
    """``nu 1_[t,tau] + 1_(tau,T] (nubar 1_Gamma + nu 1_{Omega \\ Gamma})``."""
    return Concatenate(base, continuation, tau, gamma if gamma is not None else Always())


def switch_to_feedback(spec: ProblemSpec, base: Program, eps: float, u_hat=None) -> Program:
    """Follow ``base`` until Y first drops to ``eps``, then apply the feedback law."""
    if spec.domain is None:
        raise SpecError("switching needs a domain descriptor")
    exprs = u_hat if u_hat is not None else spec.admissible_feedback
    if exprs is None:
        raise SpecError("switching needs an admissible feedback law")
    return ThresholdSwitch(base, YBelow(float(eps)), Feedback(exprs))


@dataclass(frozen=True, eq=False)
class MartingaleProgram:
    """Integrand ``a`` of the auxiliary martingale, clipped to ``[-bound, bound]^d``."""

    program: Program
    bound: float = 2.0


# --------------------------------------------------------------------------
# simulation


@dataclass
class PathBundle:
    grid: TimeGrid
    X: np.ndarray  # (n, N+1, d)
    M: np.ndarray  # (n, N+1)
    Y: np.ndarray  # (n, N+1)
    U: np.ndarray  # (n, N, k) controls applied on each step
    A: np.ndarray  # (n, N, d) martingale integrands
    dW: np.ndarray  # (n, N, d)
    divergent: np.ndarray  # (n,)
    seed: int
    path_offset: int = 0

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    def path(self, i: int) -> "AugmentedPath":
        return AugmentedPath(
            self.grid, self.X[i], self.M[i], self.Y[i], self.dW[i], self.seed, self.path_offset + i,
            bool(self.divergent[i]),
        )


@dataclass
class AugmentedPath:
    grid: TimeGrid
    X: np.ndarray  # (N+1, d)
    M: np.ndarray
    Y: np.ndarray
    dW: np.ndarray
    seed: int
    index: int = 0
    divergent: bool = False


def brownian_increments(seed, grid: TimeGrid, n_paths: int, dim: int, path_offset: int = 0) -> np.ndarray:
    """Increments (n, N, d); step j draws from Philox keyed by (seed, j)."""
    out = np.empty((n_paths, grid.steps, dim))
    sq = math.sqrt(grid.h)
    total = (path_offset + n_paths) * dim
    for j in range(grid.steps):
        gen = np.random.Generator(np.random.Philox(key=[_seed_key(seed), j]))
        z = gen.standard_normal(total)[path_offset * dim:]
        out[:, j, :] = z.reshape(n_paths, dim) * sq
    return out


def _start(program, spec, n, dim, N):
    return program.start(spec, n, dim, N)


def _distance(spec, X):
    if spec.domain is None:
        return np.full(X.shape[0], np.inf)
    return spec.domain.distance(X)


def simulate_paths(
    spec: ProblemSpec,
    t: float,
    x,
    m: float,
    y: float,
    control: Program,
    mart: Optional[MartingaleProgram],
    grid: TimeGrid,
    n_paths: int,
    seed: int,
    increments: Optional[np.ndarray] = None,
    path_offset: int = 0,
    log_stepping: Optional[bool] = None,
) -> PathBundle:
    """Simulate ``n_paths`` augmented paths from (t, x, m, y).

    ``x`` may be a single point (d,) or one start point per path (n, d).
    The control is frozen on each step; ``log_stepping`` defaults to the
    spec's ``log_coords`` opt-in.
    """
    if abs(grid.start - t) > 1e-12:
        raise ValueError("grid must start at t")
    d, k, N, h = spec.dim, spec.control_dim, grid.steps, grid.h
    x = np.asarray(x, dtype=float)
    x0 = np.broadcast_to(x.reshape(-1, d), (n_paths, d)).copy()
    if not np.all(np.isfinite(x0)):
        raise ValueError("initial state must be finite")
    dW = increments if increments is not None else brownian_increments(seed, grid, n_paths, d, path_offset)
    if dW.shape != (n_paths, N, d):
        raise ValueError(f"increments must have shape {(n_paths, N, d)}")
    log_coords = spec.log_coords if (log_stepping is None or log_stepping) else ()
    if log_coords and np.any(x0[:, list(log_coords)] <= 0):
        raise ValueError("log-stepped coordinates need a positive initial state")

    X = np.empty((n_paths, N + 1, d))
    M = np.empty((n_paths, N + 1))
    Y = np.empty((n_paths, N + 1))
    U = np.empty((n_paths, N, k))
    A = np.zeros((n_paths, N, d))
    divergent = np.zeros(n_paths, dtype=bool)
    X[:, 0] = x0
    M[:, 0] = m
    Y[:, 0] = np.minimum(y, _distance(spec, x0))

    crun = _start(control, spec, n_paths, k, N)
    arun = _start(mart.program, spec, n_paths, d, N) if mart is not None else None
    times = grid.nodes
    for i in range(N):
        s = float(times[i])
        xi, mi, yi = X[:, i], M[:, i], Y[:, i]
        u = spec.controls.project(np.asarray(crun(i, s, xi, mi, yi), dtype=float))
        U[:, i] = u
        mu = spec.mu(xi, u, s)
        sg = spec.sigma(xi, u, s)
        dw = dW[:, i]
        noise = np.einsum("nij,nj->ni", sg, dw)
        xn = xi + mu * h + noise
        for c in log_coords:
            xc = xi[:, c]
            b = mu[:, c] / xc
            row = sg[:, c, :] / xc[:, None]
            xn[:, c] = xc * np.exp((b - 0.5 * (row ** 2).sum(axis=1)) * h + (row * dw).sum(axis=1))
        if arun is not None:
            a = np.clip(np.asarray(arun(i, s, xi, mi, yi), dtype=float), -mart.bound, mart.bound)
            A[:, i] = a
            mn = mi + (a * dw).sum(axis=1)
        else:
            mn = mi
        bad = ~np.all(np.isfinite(xn), axis=1) | ~np.isfinite(mn)
        if np.any(bad):
            divergent |= bad
            xn[bad] = xi[bad]
            mn = np.where(bad, mi, mn)
        X[:, i + 1] = xn
        M[:, i + 1] = mn
        Y[:, i + 1] = np.minimum(yi, _distance(spec, xn))
    return PathBundle(grid, X, M, Y, U, A, dW, divergent, int(seed), path_offset)


def simulate(spec, t, x, m, y, control, mart, grid, seed, index: int = 0, increments=None) -> AugmentedPath:
    """Single path; identical to path ``index`` of any bundle with the same seed."""
    inc = None if increments is None else np.asarray(increments, dtype=float).reshape(1, grid.steps, spec.dim)
    b = simulate_paths(spec, t, x, m, y, control, mart, grid, 1, seed, increments=inc, path_offset=index)
    return b.path(0)


def first_exit(path, region: Region) -> int:
    """First node index whose (s, X, M) lies outside ``region``, else N."""
    times = path.grid.nodes
    X = np.asarray(path.X).reshape(len(times), -1)
    for i, s in enumerate(times):
        if not region.contains(float(s), X[i:i + 1], np.asarray(path.M)[i])[0]:
            return i
    return len(times) - 1


def stopping_index(bundle: PathBundle, rule: StopRule) -> np.ndarray:
    """Per-path first node where ``rule`` fires (N if it never does)."""
    N = bundle.grid.steps
    idx = np.full(bundle.n_paths, N)
    open_ = np.ones(bundle.n_paths, dtype=bool)
    for i, s in enumerate(bundle.grid.nodes):
        hit = rule.hit(i, float(s), bundle.X[:, i], bundle.M[:, i], bundle.Y[:, i], N) & open_
        idx[hit] = i
        open_ &= ~hit
        if not np.any(open_):
            break
    return idx


def write_paths_csv(bundle: PathBundle, directory, stem: str = "paths") -> str:
    """One CSV per bundle; the seed is part of the file name."""
    import os

    path = os.path.join(directory, f"{stem}_seed{bundle.seed}.csv")
    d = bundle.X.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "step", "time"] + [f"x{i + 1}" for i in range(d)] + ["M", "Y"])
        times = bundle.grid.nodes
        for p in range(bundle.n_paths):
            for i, s in enumerate(times):
                w.writerow(
                    [bundle.path_offset + p, i, repr(float(s))]
                    + [repr(float(v)) for v in bundle.X[p, i]]
                    + [repr(float(bundle.M[p, i])), repr(float(bundle.Y[p, i]))]
                )
    return path


def read_paths_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=float)
    return header, body


def terminal_values(bundle: PathBundle) -> np.ndarray:
    return bundle.X[:, -1]


def sample_mean_se(values) -> tuple:
    v = np.asarray(values, dtype=float)
    n = v.size
    se = float(v.std(ddof=1) / math.sqrt(n)) if n > 1 else float("inf")
    return float(v.mean()), se


def as_program(p) -> Program:
    if isinstance(p, Program):
        return p
    if isinstance(p, (int, float, Sequence, np.ndarray)):
        return Constant(p)
    raise TypeError(f"cannot interpret {p!r} as a control program")
