"""Problem specification for constrained control of a controlled diffusion.

A :class:`ProblemSpec` bundles the drift ``mu(x, u)``, the diffusion matrix
``sigma(x, u)``, the terminal reward ``f``, the constraint function ``g``,
the control set ``U`` and an optional open state domain ``O``.  Coefficients
are expressions from :mod:`constrained_control.expr` and are evaluated in a
vectorised way over batches of states.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .expr import (
    Expression,
    ExpressionDomainError,
    eval_expression,
    parse_expression,
    variables_of,
)

NEWTON_TOL = 1e-8
FD_STEP = 1e-5


class SpecError(ValueError):
    """Raised for an ill-formed problem specification."""


def _as_expr(e):
    return parse_expression(e) if isinstance(e, str) else e


# --------------------------------------------------------------------------
# control set


@dataclass(frozen=True)
class ControlSet:
    """Either a box ``prod [lo_i, hi_i]`` or a finite list of points."""

    kind: str
    lower: tuple = ()
    upper: tuple = ()
    points: tuple = ()
    points_per_axis: int = 11

    def __post_init__(self):
        if self.kind == "box":
            if len(self.lower) == 0 or len(self.lower) != len(self.upper):
                raise SpecError("box control set needs matching nonempty bounds")
            if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
                raise SpecError("box control set has lo > hi")
            if self.points_per_axis < 1:
                raise SpecError("points_per_axis must be >= 1")
        elif self.kind == "points":
            if len(self.points) == 0:
                raise SpecError("empty control set")
            k = len(self.points[0])
            if k == 0 or any(len(p) != k for p in self.points):
                raise SpecError("control points have inconsistent dimension")
        else:
            raise SpecError(f"unknown control set kind {self.kind!r}")

    @classmethod
    def box(cls, lower, upper, points_per_axis=11):
        lower = tuple(float(v) for v in np.atleast_1d(lower))
        upper = tuple(float(v) for v in np.atleast_1d(upper))
        return cls("box", lower=lower, upper=upper, points_per_axis=int(points_per_axis))

    @classmethod
    def finite(cls, points):
        pts = tuple(tuple(float(v) for v in np.atleast_1d(p)) for p in points)
        return cls("points", points=pts)

    @property
    def dim(self) -> int:
        return len(self.lower) if self.kind == "box" else len(self.points[0])

    def grid(self, points_per_axis: Optional[int] = None) -> np.ndarray:
        """Discretised controls, shape (n, k), in lexicographic order."""
        if self.kind == "points":
            return np.array(sorted(self.points), dtype=float)
        n = points_per_axis or self.points_per_axis
        axes = []
        for lo, hi in zip(self.lower, self.upper):
            axes.append(np.array([lo]) if n == 1 or lo == hi else np.linspace(lo, hi, n))
        return np.array(list(itertools.product(*axes)), dtype=float)

    def project(self, u: np.ndarray) -> np.ndarray:
        """Map controls (..., k) onto the set (clip, or nearest point)."""
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, np.array(self.lower), np.array(self.upper))
        pts = np.array(self.points)
        flat = u.reshape(-1, pts.shape[1])
        d2 = ((flat[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        return pts[np.argmin(d2, axis=1)].reshape(u.shape)

    def contains(self, u, tol=1e-12) -> bool:
        u = np.atleast_2d(np.asarray(u, dtype=float))
        if self.kind == "box":
            return bool(np.all(u >= np.array(self.lower) - tol) and np.all(u <= np.array(self.upper) + tol))
        pts = np.array(self.points)
        d = np.abs(u[:, None, :] - pts[None, :, :]).max(axis=2).min(axis=1)
        return bool(np.all(d <= tol))


# --------------------------------------------------------------------------
# state domain


@dataclass(frozen=True)
class Domain:
    """Open state domain ``O`` with a signed function ``delta``.

    ``delta > 0`` inside, ``= 0`` on the boundary, ``< 0`` outside.  The
    built-in shapes (half-space, box, ball) have closed-form distances; a
    ``level`` domain is given by an arbitrary expression in ``x1..xd``.
    """

    kind: str
    dim: int
    normal: tuple = ()
    offset: float = 0.0
    lower: tuple = ()
    upper: tuple = ()
    center: tuple = ()
    radius: float = 0.0
    delta_expr: Optional[Expression] = None
    interior_probes: tuple = ()
    exterior_probes: tuple = ()

    def __post_init__(self):
        if self.kind == "halfspace":
            n = np.asarray(self.normal, dtype=float)
            if n.shape != (self.dim,) or not np.linalg.norm(n) > 0:
                raise SpecError("half-space needs a nonzero normal of length d")
        elif self.kind == "box":
            if len(self.lower) != self.dim or len(self.upper) != self.dim:
                raise SpecError("box domain bounds must have length d")
            if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
                raise SpecError("box domain needs lo < hi")
        elif self.kind == "ball":
            if len(self.center) != self.dim or not self.radius > 0:
                raise SpecError("ball domain needs a center of length d and radius > 0")
        elif self.kind == "level":
            if self.delta_expr is None:
                raise SpecError("level-set domain needs a delta expression")
        else:
            raise SpecError(f"unknown domain kind {self.kind!r}")

    @classmethod
    def halfspace(cls, normal, offset=0.0, **kw):
        normal = tuple(float(v) for v in np.atleast_1d(normal))
        return cls("halfspace", len(normal), normal=normal, offset=float(offset), **kw)

    @classmethod
    def box(cls, lower, upper, **kw):
        lower = tuple(float(v) for v in np.atleast_1d(lower))
        upper = tuple(float(v) for v in np.atleast_1d(upper))
        return cls("box", len(lower), lower=lower, upper=upper, **kw)

    @classmethod
    def ball(cls, center, radius, **kw):
        center = tuple(float(v) for v in np.atleast_1d(center))
        return cls("ball", len(center), center=center, radius=float(radius), **kw)

    @classmethod
    def level(cls, dim, delta, **kw):
        return cls("level", int(dim), delta_expr=_as_expr(delta), **kw)

    def delta(self, x) -> np.ndarray:
        """Signed function at points x of shape (..., d)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "halfspace":
            n = np.asarray(self.normal)
            return (x @ n) / np.linalg.norm(n) - self.offset / np.linalg.norm(n)
        if self.kind == "box":
            lo, hi = np.asarray(self.lower), np.asarray(self.upper)
            return np.minimum(x - lo, hi - x).min(axis=-1)
        if self.kind == "ball":
            return self.radius - np.linalg.norm(x - np.asarray(self.center), axis=-1)
        env = {f"x{i + 1}": x[..., i] for i in range(self.dim)}
        return np.broadcast_to(eval_expression(self.delta_expr, env), x.shape[:-1]).astype(float)

    def grad_delta(self, x) -> np.ndarray:
        """Central-difference gradient of ``delta`` (step 1e-5)."""
        x = np.asarray(x, dtype=float)
        g = np.empty_like(x)
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = FD_STEP
            g[..., i] = (self.delta(x + e) - self.delta(x - e)) / (2 * FD_STEP)
        return g

    def distance(self, x) -> np.ndarray:
        """Euclidean distance to the complement of O (0 outside O)."""
        x = np.asarray(x, dtype=float)
        if self.kind in ("halfspace", "box", "ball"):
            return np.maximum(self.delta(x), 0.0)
        flat = x.reshape(-1, self.dim)
        inside = self.delta(flat) > 0
        out = np.zeros(flat.shape[0])
        if np.any(inside):
            foot = self.project_to_boundary(flat[inside])
            out[inside] = np.linalg.norm(flat[inside] - foot, axis=1)
        return out.reshape(x.shape[:-1])

    def project_to_boundary(self, x, max_iter=60) -> np.ndarray:
        """Foot points on ``delta = 0`` by damped Newton from x.

        Points where Newton stalls fall back to bisection along the
        ``-grad delta(x)`` ray.  Tolerance on |delta| is 1e-8.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = x.copy()
        done = np.zeros(len(z), dtype=bool)
        for _ in range(max_iter):
            val = self.delta(z)
            done = np.abs(val) <= NEWTON_TOL
            if np.all(done):
                break
            g = self.grad_delta(z)
            gn2 = (g ** 2).sum(axis=1)
            gn2 = np.where(gn2 > 0, gn2, np.nan)
            step = (val / gn2)[:, None] * g
            step = np.nan_to_num(step)
            # damping: halve the step until |delta| does not increase
            lam = np.ones(len(z))
            for _ in range(20):
                trial = z - lam[:, None] * step
                worse = (np.abs(self.delta(trial)) > np.abs(val)) & ~done
                if not np.any(worse):
                    break
                lam = np.where(worse, lam / 2, lam)
            z = np.where(done[:, None], z, z - lam[:, None] * step)
        bad = np.abs(self.delta(z)) > NEWTON_TOL
        if np.any(bad):
            z[bad] = self._bisect_ray(x[bad])
        return z

    def _bisect_ray(self, x):
        """Nearest sign change along ``-grad delta`` and the coordinate rays.

        The coordinate rays cover critical points of ``delta`` where the
        gradient vanishes.
        """
        g = self.grad_delta(x)
        gn = np.linalg.norm(g, axis=1, keepdims=True)
        sgn = np.sign(self.delta(x))[:, None]
        dirs = [np.where(gn > 1e-12, sgn * g / np.maximum(gn, 1e-300), 0.0)]
        for i in range(self.dim):
            e = np.zeros(self.dim)
            e[i] = 1.0
            dirs += [np.broadcast_to(e, x.shape), np.broadcast_to(-e, x.shape)]
        best = x.copy()
        best_r = np.full(len(x), np.inf)
        for n in dirs:
            r = self._ray_root(x, n, sgn[:, 0])
            better = r < best_r
            best_r = np.where(better, r, best_r)
            best = np.where(better[:, None], x - np.where(better, r, 0.0)[:, None] * n, best)
        return best

    def _ray_root(self, x, n, sgn, max_radius=1e6):
        """Smallest r > 0 (by doubling then bisection) where delta(x - r n) changes sign; inf if none."""
        live = np.linalg.norm(n, axis=1) > 0
        lo = np.zeros(len(x))
        hi = np.full(len(x), 1e-3)
        for _ in range(60):
            hit = np.sign(self.delta(x - hi[:, None] * n)) != sgn
            grow = live & ~hit & (hi < max_radius)
            if not np.any(grow):
                break
            # keep lo as the last radius known to be on the starting side
            lo = np.where(grow, hi, lo)
            hi = np.where(grow, hi * 2, hi)
        found = live & (np.sign(self.delta(x - hi[:, None] * n)) != sgn)
        for _ in range(100):
            mid = (lo + hi) / 2
            same = np.sign(self.delta(x - mid[:, None] * n)) == sgn
            lo = np.where(same, mid, lo)
            hi = np.where(same, hi, mid)
            if np.all(hi - lo < NEWTON_TOL):
                break
        return np.where(found, (lo + hi) / 2, np.inf)


# --------------------------------------------------------------------------
# problem


@dataclass(frozen=True)
class ProblemSpec:
    """Constrained control problem ``sup E f(X_T)`` s.t. ``E g(X_T) <= m``.

    ``drift`` has d entries, ``diffusion`` is a d x d nested tuple (rows).
    ``log_coords`` lists 0-based state coordinates stepped in log space by
    the simulator (positivity-preserving fixtures).
    """

    dim: int
    horizon: float
    drift: tuple
    diffusion: tuple
    reward: Expression
    constraint: Expression
    controls: ControlSet
    domain: Optional[Domain] = None
    admissible_feedback: Optional[tuple] = None
    inward_feedback: Optional[tuple] = None
    discount: float = 0.0
    name: str = "problem"
    log_coords: tuple = ()
    reward_bounded: bool = False
    reward_lsc: bool = True
    constraint_usc: bool = True
    _cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        if not isinstance(self.dim, int) or self.dim < 1:
            raise SpecError("dimension must be a positive integer")
        if not self.horizon > 0:
            raise SpecError("horizon T must be > 0")
        if self.discount < 0:
            raise SpecError("discount must be >= 0")
        d, k = self.dim, self.controls.dim
        if len(self.drift) != d:
            raise SpecError(f"drift has {len(self.drift)} entries, expected {d}")
        if len(self.diffusion) != d or any(len(r) != d for r in self.diffusion):
            raise SpecError(f"diffusion must be a {d}x{d} matrix")
        allowed_state = {"t"} | {f"x{i + 1}" for i in range(d)}
        allowed = allowed_state | {f"u{j + 1}" for j in range(k)}
        for e in list(self.drift) + [c for r in self.diffusion for c in r]:
            _check_vars(e, allowed, "coefficient")
        _check_vars(self.reward, allowed_state, "reward")
        _check_vars(self.constraint, allowed_state | {"y"}, "constraint")
        for fb, label in ((self.admissible_feedback, "admissible feedback"), (self.inward_feedback, "inward feedback")):
            if fb is not None:
                if len(fb) != k:
                    raise SpecError(f"{label} must have {k} entries")
                for e in fb:
                    _check_vars(e, allowed_state, label)
        if self.domain is not None and self.domain.dim != d:
            raise SpecError("domain dimension does not match d")
        if any(not 0 <= c < d for c in self.log_coords):
            raise SpecError("log_coords out of range")

    @classmethod
    def build(cls, dim, horizon, drift, diffusion, reward, constraint, controls, **kw):
        """Convenience constructor accepting strings for every expression."""
        drift = tuple(_as_expr(e) for e in np.atleast_1d(np.asarray(drift, dtype=object)))
        diff = np.asarray(diffusion, dtype=object)
        if diff.ndim == 0:
            diff = diff.reshape(1, 1)
        elif diff.ndim == 1:
            diff = diff.reshape(dim, dim)
        diffusion = tuple(tuple(_as_expr(e) for e in row) for row in diff)
        for key in ("admissible_feedback", "inward_feedback"):
            if kw.get(key) is not None:
                kw[key] = tuple(_as_expr(e) for e in np.atleast_1d(np.asarray(kw[key], dtype=object)))
        return cls(
            dim=int(dim),
            horizon=float(horizon),
            drift=drift,
            diffusion=diffusion,
            reward=_as_expr(reward),
            constraint=_as_expr(constraint),
            controls=controls,
            **kw,
        )

    @property
    def control_dim(self) -> int:
        return self.controls.dim

    def _env(self, x, u=None, t=0.0, y=None):
        x = np.asarray(x, dtype=float)
        env = {"t": t}
        for i in range(self.dim):
            env[f"x{i + 1}"] = x[..., i]
        if u is not None:
            u = np.asarray(u, dtype=float)
            for j in range(self.control_dim):
                env[f"u{j + 1}"] = u[..., j]
        if y is not None:
            env["y"] = y
        return env

    def mu(self, x, u, t=0.0) -> np.ndarray:
        """Drift, shape broadcast(x[..., 0], u[..., 0]) + (d,)."""
        env = self._env(x, u, t)
        shape = _batch_shape(x, u)
        vals = [np.broadcast_to(eval_expression(e, env), shape) for e in self.drift]
        return np.stack(vals, axis=-1).astype(float)

    def sigma(self, x, u, t=0.0) -> np.ndarray:
        """Diffusion matrix, shape (..., d, d)."""
        env = self._env(x, u, t)
        shape = _batch_shape(x, u)
        flat = [np.broadcast_to(eval_expression(e, env), shape) for row in self.diffusion for e in row]
        return np.stack(flat, axis=-1).reshape(shape + (self.dim, self.dim)).astype(float)

    def f(self, x, t=0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(eval_expression(self.reward, self._env(x, t=t)), x.shape[:-1]).astype(float)

    def g(self, x, y=None, t=0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(eval_expression(self.constraint, self._env(x, t=t, y=y)), x.shape[:-1]).astype(float)

    def _feedback(self, exprs, x, t=0.0):
        x = np.asarray(x, dtype=float)
        env = self._env(x, t=t)
        vals = [np.broadcast_to(eval_expression(e, env), x.shape[:-1]) for e in exprs]
        return self.controls.project(np.stack(vals, axis=-1))

    def u_hat(self, x, t=0.0):
        if self.admissible_feedback is None:
            raise SpecError("problem has no admissible feedback law")
        return self._feedback(self.admissible_feedback, x, t)

    def u_check(self, x, t=0.0):
        if self.inward_feedback is None:
            raise SpecError("problem has no inward feedback law")
        return self._feedback(self.inward_feedback, x, t)

    def depends_on_time(self) -> bool:
        names = set()
        for e in list(self.drift) + [c for r in self.diffusion for c in r]:
            names |= variables_of(e)
        return "t" in names

    def sigma_depends_on_control(self) -> bool:
        names = set()
        for r in self.diffusion:
            for c in r:
                names |= variables_of(c)
        return any(n.startswith("u") for n in names)

    def with_reward(self, reward) -> "ProblemSpec":
        return _replace(self, reward=_as_expr(reward))

    def with_constraint(self, constraint) -> "ProblemSpec":
        return _replace(self, constraint=_as_expr(constraint))

    def with_domain(self, domain) -> "ProblemSpec":
        return _replace(self, domain=domain)


def _batch_shape(x, u):
    xs = np.shape(x)[:-1]
    us = np.shape(u)[:-1] if u is not None else ()
    return np.broadcast_shapes(xs, us)


def _replace(spec, **changes):
    import dataclasses

    changes.setdefault("_cache", {})
    return dataclasses.replace(spec, **changes)


def _check_vars(expr, allowed, label):
    bad = sorted(variables_of(expr) - set(allowed))
    if bad:
        raise SpecError(f"{label} expression references {', '.join(bad)}, outside the declared dimensions")


def distance_to_complement(spec: ProblemSpec, x) -> float | np.ndarray:
    """Distance from x to ``R^d \\ O``; 0 for points outside O."""
    if spec.domain is None:
        raise SpecError("problem has no domain descriptor")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 1
    out = spec.domain.distance(np.atleast_2d(x) if scalar else x)
    return float(out[0]) if scalar else out


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Check:
    name: str
    status: str  # pass | warn | fail
    evidence: dict

    def as_dict(self):
        return {"name": self.name, "status": self.status, "evidence": self.evidence}


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple
    probes: tuple
    seed: int

    @property
    def ok(self) -> bool:
        return all(c.status == "pass" for c in self.checks)

    @property
    def statuses(self) -> dict:
        return {c.name: c.status for c in self.checks}

    def __getitem__(self, name) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _dilate(lo, hi, factor):
    c = (lo + hi) / 2
    r = (hi - lo) / 2 * factor
    return c - r, c + r


def _sample_box(rng, lo, hi, n):
    return lo + (hi - lo) * rng.random((n, len(lo)))


def _sample_controls(rng, controls, n):
    if controls.kind == "box":
        lo, hi = np.array(controls.lower), np.array(controls.upper)
        return _sample_box(rng, lo, hi, n)
    pts = np.array(controls.points)
    return pts[rng.integers(0, len(pts), n)]


GROWTH_RATIO_WARN = 1.5


def validate_problem(spec: ProblemSpec, box, seed: int = 0, n_samples: int = 2000) -> ValidationReport:
    """Sampled checks of the standing assumptions on a validation box.

    Lipschitz and growth constants are estimated on the box and on the box
    dilated by 2 about its centre; an estimate that grows by more than a
    factor 1.5 between the two is reported as ``warn``.
    """
    lo = np.atleast_1d(np.asarray(box[0], dtype=float))
    hi = np.atleast_1d(np.asarray(box[1], dtype=float))
    if lo.shape != (spec.dim,) or hi.shape != (spec.dim,):
        raise SpecError("validation box dimension does not match d")
    if np.any(lo > hi):
        raise SpecError("empty validation box")
    rng = np.random.Generator(np.random.PCG64(seed))

    def estimates(blo, bhi):
        x = _sample_box(rng, blo, bhi, n_samples)
        y = _sample_box(rng, blo, bhi, n_samples)
        u = _sample_controls(rng, spec.controls, n_samples)
        v = _sample_controls(rng, spec.controls, n_samples)
        dist = np.sqrt(((x - y) ** 2).sum(axis=1) + ((u - v) ** 2).sum(axis=1))
        dist = np.maximum(dist, 1e-12)
        mx, my = spec.mu(x, u), spec.mu(y, v)
        sx, sy = spec.sigma(x, u), spec.sigma(y, v)
        nx = np.linalg.norm(x, axis=1)
        lip_mu = np.max(np.linalg.norm(mx - my, axis=1) / dist)
        lip_sigma = np.max(np.linalg.norm((sx - sy).reshape(n_samples, -1), axis=1) / dist)
        lin_mu = np.max(np.linalg.norm(mx, axis=1) / (1 + nx))
        lin_sigma = np.max(np.linalg.norm(sx.reshape(n_samples, -1), axis=1) / (1 + nx))
        quad_f = np.max(np.abs(spec.f(x)) / (1 + nx ** 2))
        quad_g = np.max(np.abs(spec.g(x, y=np.ones(n_samples))) / (1 + nx ** 2))
        return {
            "lipschitz_mu": lip_mu,
            "lipschitz_sigma": lip_sigma,
            "linear_growth": max(lin_mu, lin_sigma),
            "quadratic_growth_f": quad_f,
            "quadratic_growth_g": quad_g,
        }

    probes = (tuple(lo.tolist()), tuple(hi.tolist()))
    try:
        inner = estimates(lo, hi)
        outer = estimates(*_dilate(lo, hi, 2.0))
    except ExpressionDomainError as exc:
        return ValidationReport((Check("evaluation", "fail", {"error": str(exc)}),), probes, seed)

    checks = []
    for name in ("lipschitz_mu", "lipschitz_sigma", "linear_growth", "quadratic_growth_f", "quadratic_growth_g"):
        a, b = float(inner[name]), float(outer[name])
        if not (np.isfinite(a) and np.isfinite(b)):
            status = "fail"
        elif b > GROWTH_RATIO_WARN * max(a, 1e-12) and b > 1e-9:
            status = "warn"
        else:
            status = "pass"
        checks.append(Check(name, status, {"box": a, "dilated_box": b}))
    if spec.reward_bounded:
        checks.append(Check("reward_bounded_or_linear_growth", "pass", {"reward_bounded": True}))
    else:
        lin = next(c for c in checks if c.name == "linear_growth")
        checks.append(Check("reward_bounded_or_linear_growth", lin.status, {"reward_bounded": False}))
    checks.append(
        Check(
            "semicontinuity_asserted",
            "pass" if (spec.reward_lsc and spec.constraint_usc) else "warn",
            {"reward_lsc": spec.reward_lsc, "constraint_usc": spec.constraint_usc},
        )
    )
    if spec.domain is not None:
        dom = spec.domain
        ins = np.array(dom.interior_probes, dtype=float).reshape(-1, spec.dim)
        out = np.array(dom.exterior_probes, dtype=float).reshape(-1, spec.dim)
        ok_in = bool(np.all(dom.delta(ins) > 0)) if len(ins) else True
        ok_out = bool(np.all(dom.delta(out) < 0)) if len(out) else True
        checks.append(
            Check(
                "domain_sign",
                "pass" if ok_in and ok_out else "fail",
                {"interior_ok": ok_in, "exterior_ok": ok_out, "n_probes": len(ins) + len(out)},
            )
        )
    return ValidationReport(tuple(checks), probes, seed)


def linear_growth_ok(spec: ProblemSpec, box, seed: int = 0) -> bool:
    return validate_problem(spec, box, seed)["linear_growth"].status == "pass"


def as_points(x, dim) -> np.ndarray:
    return np.asarray(x, dtype=float).reshape(-1, dim)


def float_tuple(v: Sequence[float]) -> tuple:
    return tuple(float(a) for a in v)
