"""Grids, value fields and policy fields."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

NEG_INF = float("-inf")


@dataclass(frozen=True)
class Grid:
    """Uniform grid over ``[t0, T] x box`` and optionally an m-interval.

    ``nt`` counts time intervals, ``nx`` and ``nm`` count nodes.
    """

    t0: float
    T: float
    nt: int
    x_lower: tuple
    x_upper: tuple
    nx: tuple
    m_lower: Optional[float] = None
    m_upper: Optional[float] = None
    nm: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "x_lower", tuple(float(v) for v in np.atleast_1d(self.x_lower)))
        object.__setattr__(self, "x_upper", tuple(float(v) for v in np.atleast_1d(self.x_upper)))
        nx = tuple(int(v) for v in np.atleast_1d(self.nx))
        if len(nx) == 1 and len(self.x_lower) > 1:
            nx = nx * len(self.x_lower)
        object.__setattr__(self, "nx", nx)
        if not self.T > self.t0 or self.nt < 1:
            raise ValueError("grid needs T > t0 and nt >= 1")
        if not (len(self.x_lower) == len(self.x_upper) == len(self.nx)):
            raise ValueError("x bounds and node counts must have the same length")
        if any(n < 2 for n in self.nx) or any(hi <= lo for lo, hi in zip(self.x_lower, self.x_upper)):
            raise ValueError("each x axis needs >= 2 nodes and lo < hi")
        if self.nm is not None:
            if self.nm < 2 or not self.m_upper > self.m_lower:
                raise ValueError("m axis needs >= 2 nodes and m_lo < m_hi")

    @classmethod
    def make(cls, T, nt, x_lower, x_upper, nx, m_lower=None, m_upper=None, nm=None, t0=0.0):
        return cls(float(t0), float(T), int(nt), x_lower, x_upper, nx,
                   None if m_lower is None else float(m_lower),
                   None if m_upper is None else float(m_upper),
                   None if nm is None else int(nm))

    @property
    def dim(self) -> int:
        return len(self.nx)

    @property
    def has_m(self) -> bool:
        return self.nm is not None

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.t0, self.T, self.nt + 1)

    @property
    def h_t(self) -> float:
        return (self.T - self.t0) / self.nt

    @property
    def x_axes(self) -> list:
        return [np.linspace(lo, hi, n) for lo, hi, n in zip(self.x_lower, self.x_upper, self.nx)]

    @property
    def h_x(self) -> tuple:
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.x_lower, self.x_upper, self.nx))

    @property
    def m_axis(self) -> Optional[np.ndarray]:
        return np.linspace(self.m_lower, self.m_upper, self.nm) if self.has_m else None

    @property
    def h_m(self) -> Optional[float]:
        return (self.m_upper - self.m_lower) / (self.nm - 1) if self.has_m else None

    @property
    def axes(self) -> list:
        """State axes: x axes followed by the m axis when present."""
        return self.x_axes + ([self.m_axis] if self.has_m else [])

    @property
    def spacings(self) -> tuple:
        return self.h_x + ((self.h_m,) if self.has_m else ())

    @property
    def state_shape(self) -> tuple:
        return self.nx + ((self.nm,) if self.has_m else ())

    @property
    def shape(self) -> tuple:
        return (self.nt + 1,) + self.state_shape

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def state_points(self) -> np.ndarray:
        """Physical coordinates of all state nodes, (n, D) in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def x_grid(self) -> "Grid":
        """Same grid without the m axis."""
        return Grid(self.t0, self.T, self.nt, self.x_lower, self.x_upper, self.nx)

    def with_m(self, m_lower, m_upper, nm) -> "Grid":
        return Grid(self.t0, self.T, self.nt, self.x_lower, self.x_upper, self.nx, float(m_lower), float(m_upper), int(nm))

    def time_index(self, t) -> int:
        return int(round((t - self.t0) / self.h_t))

    def as_dict(self) -> dict:
        return {
            "t0": self.t0, "T": self.T, "nt": self.nt,
            "x_lower": list(self.x_lower), "x_upper": list(self.x_upper), "nx": list(self.nx),
            "m_lower": self.m_lower, "m_upper": self.m_upper, "nm": self.nm,
        }


def _frac_index(axis_lo, h, n, q):
    f = (q - axis_lo) / h
    f = np.clip(f, 0.0, n - 1)
    i0 = np.minimum(np.floor(f).astype(int), n - 2)
    return i0, f - i0


def interpolate(values, mask, lowers, spacings, sizes, q, mode="linear"):
    """Multilinear interpolation of ``values`` at query points ``q`` (n, D).

    Queries are clamped to the grid box.  Corners flagged in ``mask`` are
    dropped and the remaining weights renormalised; a query whose unmasked
    weight vanishes gets ``-inf``.
    """
    q = np.atleast_2d(np.asarray(q, dtype=float))
    D = q.shape[1]
    if mode == "nearest":
        idx = []
        for k in range(D):
            f = np.clip(np.rint((q[:, k] - lowers[k]) / spacings[k]), 0, sizes[k] - 1).astype(int)
            idx.append(f)
        flat = np.ravel_multi_index(tuple(idx), sizes)
        out = values.reshape(-1)[flat].astype(float)
        if mask is not None:
            out = np.where(mask.reshape(-1)[flat], NEG_INF, out)
        return out
    base, frac = [], []
    for k in range(D):
        i0, fr = _frac_index(lowers[k], spacings[k], sizes[k], q[:, k])
        base.append(i0)
        frac.append(fr)
    vflat = values.reshape(-1)
    mflat = None if mask is None else mask.reshape(-1)
    acc = np.zeros(len(q))
    wsum = np.zeros(len(q))
    for corner in itertools.product((0, 1), repeat=D):
        w = np.ones(len(q))
        idx = []
        for k, c in enumerate(corner):
            w = w * (frac[k] if c else 1.0 - frac[k])
            idx.append(base[k] + c)
        flat = np.ravel_multi_index(tuple(idx), sizes)
        if mflat is not None:
            w = np.where(mflat[flat], 0.0, w)
        v = vflat[flat]
        acc += np.where(w > 0, w * np.where(np.isfinite(v), v, 0.0), 0.0)
        wsum += w
    with np.errstate(invalid="ignore", divide="ignore"):
        out = acc / wsum
    return np.where(wsum > 1e-12, out, NEG_INF)


@dataclass
class ValueField:
    """Grid function with a domain mask; masked nodes hold ``NEG_INF``."""

    grid: Grid
    values: np.ndarray
    masked: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.shape != self.grid.shape or self.masked.shape != self.grid.shape:
            raise ValueError("value/mask arrays must match the grid shape")

    def check_invariants(self) -> bool:
        return bool(np.all(self.values[self.masked] == NEG_INF) and np.all(np.isfinite(self.values[~self.masked])))

    def interp(self, t, x, m=None, mode="linear") -> np.ndarray:
        """Mask-aware multilinear interpolation in (t, x, [m])."""
        g = self.grid
        x = np.asarray(x, dtype=float).reshape(-1, g.dim)
        n = len(x)
        cols = [np.broadcast_to(np.asarray(t, dtype=float), (n,))] + [x[:, i] for i in range(g.dim)]
        if g.has_m:
            if m is None:
                raise ValueError("field has an m axis; pass m")
            cols.append(np.broadcast_to(np.asarray(m, dtype=float), (n,)))
        q = np.stack(cols, axis=1)
        lowers = (g.t0,) + g.x_lower + ((g.m_lower,) if g.has_m else ())
        spacings = (g.h_t,) + g.spacings
        return interpolate(self.values, self.masked, lowers, spacings, g.shape, q, mode)

    def at(self, t, x, m=None) -> float:
        return float(self.interp(t, np.atleast_1d(x), m)[0])

    def slice(self, n) -> np.ndarray:
        return self.values[n]

    def inside_grid(self, x, m=None) -> np.ndarray:
        g = self.grid
        x = np.asarray(x, dtype=float).reshape(-1, g.dim)
        ok = np.all((x >= np.array(g.x_lower) - 1e-12) & (x <= np.array(g.x_upper) + 1e-12), axis=1)
        if g.has_m and m is not None:
            m = np.broadcast_to(np.asarray(m, dtype=float), ok.shape)
            ok &= (m >= g.m_lower - 1e-12) & (m <= g.m_upper + 1e-12)
        return ok


@dataclass
class PolicyField:
    """Per-node minimisers of the discrete Hamiltonian."""

    grid: Grid
    u: np.ndarray  # grid.shape + (k,)
    a: Optional[np.ndarray] = None  # grid.shape + (d,)
    tie_break: str = "lexicographic"

    def evaluate(self, component, s, X, M=None, mode="linear") -> np.ndarray:
        g = self.grid
        arr = self.u if component == "u" else self.a
        if arr is None:
            raise ValueError(f"policy has no {component!r} component")
        X = np.asarray(X, dtype=float).reshape(-1, g.dim)
        n = len(X)
        cols = [np.full(n, float(s))] + [X[:, i] for i in range(g.dim)]
        if g.has_m:
            cols.append(np.broadcast_to(np.asarray(M, dtype=float), (n,)))
        q = np.stack(cols, axis=1)
        lowers = (g.t0,) + g.x_lower + ((g.m_lower,) if g.has_m else ())
        spacings = (g.h_t,) + g.spacings
        out = [
            interpolate(arr[..., j], None, lowers, spacings, g.shape, q, mode) for j in range(arr.shape[-1])
        ]
        return np.stack(out, axis=1)
