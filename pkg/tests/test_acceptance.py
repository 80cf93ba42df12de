"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (shown even
under output capture) before asserting.
"""

import json
import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from conftest import solved
from constrained_control import fixtures
from constrained_control.boundary import check_class_R_sufficient, check_hamiltonian_regularity
from constrained_control.cli import run
from constrained_control.dpp import (
    check_dpp_lower,
    check_dpp_upper,
    check_open_closed,
    check_right_continuity,
    standard_cases,
)
from constrained_control.hjb import (
    Grid,
    HamiltonianParams,
    solve_constraint_floor,
    solve_expectation_constrained,
    solve_state_constrained,
    solve_unconstrained,
)
from constrained_control.model import ControlSet, ProblemSpec
from constrained_control.reports import FAIL, PASS
from constrained_control.sde import Constant, TimeGrid, sample_mean_se, simulate_paths

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail
    return emit


# --------------------------------------------------------------------------
# 1. deterministic fixture against a brute-force discrete DP


def lattice_dp(n_steps=50, h_m=0.01, m_lo=-2.0, m_hi=2.0, jumps=(0, 1, 2, 3)):
    """Exact dynamic programme for dX = u dt, u in {-1, 0, 1}, f = g = x.

    X lives on the lattice of step ``1 / n_steps`` and M on the m-lattice
    of step ``h_m``; each step M moves up or down ``j`` cells with equal
    probability, which is a binary martingale.  The terminal condition is
    ``f(x)`` where ``x <= m`` and ``-inf`` elsewhere; M may not leave the
    lattice.
    """
    dt = 1.0 / n_steps
    xs = np.arange(-n_steps, n_steps + 1) * dt
    ms = m_lo + h_m * np.arange(int(round((m_hi - m_lo) / h_m)) + 1)
    V = np.where(xs[:, None] <= ms[None, :] + 1e-12, np.broadcast_to(xs[:, None], (len(xs), len(ms))), -np.inf)

    def shifted(A, dx, dm):
        out = np.full_like(A, -np.inf)
        nx, nm = A.shape
        out[max(-dx, 0):nx + min(-dx, 0), max(-dm, 0):nm + min(-dm, 0)] = \
            A[max(dx, 0):nx + min(dx, 0), max(dm, 0):nm + min(dm, 0)]
        return out

    for _ in range(n_steps):
        best = np.full_like(V, -np.inf)
        for du in (-1, 0, 1):
            for j in jumps:
                best = np.maximum(best, 0.5 * (shifted(V, du, j) + shifted(V, du, -j)))
        V = best
    return xs, ms, V


def test_c1_deterministic_matches_oracle(verdict):
    xs, ms, W = lattice_dp()
    i0 = int(np.argmin(np.abs(xs)))
    F = fixtures.deterministic()
    start = time.process_time()
    V, _, _ = solve_expectation_constrained(F.spec, Grid.make(**F.grid), HamiltonianParams(**F.params))
    elapsed = time.process_time() - start
    errs = []
    for _, m in F.probes:
        oracle = W[i0, int(np.argmin(np.abs(ms - m)))]
        assert abs(oracle - min(m, 1.0)) <= 1e-9
        errs.append(abs(V.at(0.0, [0.0], m) - oracle))
    worst = max(errs)
    verdict(1, worst <= 0.05 and elapsed < 60, f"max |V - oracle| = {worst:.4f} (tol 0.05), cpu {elapsed:.1f}s")


# --------------------------------------------------------------------------
# 2. unconstrained reduction


def test_c2_unconstrained_reduction(verdict):
    F = fixtures.unconstrained()
    grid = Grid.make(**F.grid)
    P = HamiltonianParams(**F.params)
    V, _, _ = solve_expectation_constrained(F.spec, grid, P)
    U, _ = solve_unconstrained(F.spec, grid.x_grid(), P)
    x = grid.x_axes[0]
    inner = np.abs(x) <= 2.0
    top = np.max(np.abs(V.values[:, inner, -1] - U.values[:, inner]))
    exact = np.max(np.abs(U.values[:, inner] - (x[inner][None, :] + (1 - grid.times)[:, None])))
    h = grid.h_x[0]
    verdict(2, top <= 2 * h and exact <= 0.02,
            f"top slice vs unconstrained {top:.2e} (tol {2 * h:.3f}), interior error {exact:.4f} (tol 0.02)")


# --------------------------------------------------------------------------
# 3. constraint floor


def test_c3_probability_floor(verdict):
    F = fixtures.prob_constraint()
    grid = Grid.make(**{k: v for k, v in F.grid.items() if k not in ("m_lower", "m_upper", "nm")})
    v = solve_constraint_floor(F.spec, grid, HamiltonianParams(**F.params)).at(0.0, [0.0])
    b = simulate_paths(F.spec, 0.0, [0.0], 0.0, math.inf, Constant(1.0), None, TimeGrid(0, 1, 100), 100_000, 5)
    mc, se = sample_mean_se(F.spec.g(b.X[:, -1]))
    exact = norm.cdf(-1)
    ok = abs(v - exact) <= 0.02 and abs(mc - exact) <= 3 * se and abs(v - mc) <= 0.02 + 3 * se
    verdict(3, ok, f"grid {v:.4f}, Monte Carlo {mc:.4f} +- {se:.4f}, exact {exact:.4f}")


# --------------------------------------------------------------------------
# 4. monotonicity in m


@pytest.mark.parametrize("name", ["deterministic", "stochastic", "prob_constraint", "drive_to_zero"])
def test_c4_monotone_in_m(verdict, name):
    V = solved(name).value
    vals = np.where(V.masked, -np.inf, V.values)
    # every pair m1 <= m2 at once: the running max from below never exceeds V
    run_max = np.maximum.accumulate(vals, axis=-1)
    bad = (run_max > vals + 1e-12) & ~V.masked
    verdict(4, not bad.any(), f"{name}: {int(bad.sum())} violating nodes of {V.values.size}")


# --------------------------------------------------------------------------
# 5. scheme monotonicity in the reward


def spec_with(f, g="x1", sigma="0.5", U=(-1, 1)):
    return ProblemSpec.build(1, 1.0, ["u1"], [[sigma]], f, g, ControlSet.box([U[0]], [U[1]], 5))


REWARD_PAIRS = [("x1", "x1 + 0.1"), ("min(x1, 1)", "x1"), ("0 - x1^2", "0 - x1^2 + abs(x1)")]


def ordered(a, b):
    return bool(np.all(a.values <= b.values + 1e-12))


def test_c5_scheme_monotone(verdict):
    grid = Grid.make(1.0, 40, [-2.0], [2.0], 41, -2.0, 2.0, 41)
    P = HamiltonianParams(A=2.0, a_points=5)
    results = []
    for f1, f2 in REWARD_PAIRS:
        a, _ = solve_unconstrained(spec_with(f1), grid.x_grid(), P)
        b, _ = solve_unconstrained(spec_with(f2), grid.x_grid(), P)
        results.append(("unconstrained", f1, f2, ordered(a, b)))
        a, _, _ = solve_expectation_constrained(spec_with(f1), grid, P)
        b, _, _ = solve_expectation_constrained(spec_with(f2), grid, P)
        results.append(("constrained", f1, f2, ordered(a, b)))
    geo = fixtures.geometric()
    gg = Grid.make(1.0, 100, [0.0], [5.0], 51)
    Pg = HamiltonianParams(**geo.params)
    for f1, f2 in [("0", "x1"), ("min(x1, 2)", "x1"), ("x1", "x1 + 0.5*min(x1, 1)")]:
        a, _ = solve_state_constrained(geo.spec.with_reward(f1), gg, Pg)
        b, _ = solve_state_constrained(geo.spec.with_reward(f2), gg, Pg)
        results.append(("state", f1, f2, ordered(a, b)))
    bad = [r[:3] for r in results if not r[3]]
    verdict(5, not bad, f"{len(results) - len(bad)}/{len(results)} ordered pairs" + (f", broken: {bad}" if bad else ""))


# --------------------------------------------------------------------------
# 6. weak DPP inequalities


@pytest.mark.slow
@pytest.mark.parametrize("name", ["deterministic", "stochastic", "drive_to_zero"])
def test_c6_weak_dpp(verdict, name):
    fx = solved(name)
    point = (0.0, 0.0, 0.5)
    counts = {}
    for side, label, nu, alpha, tau in standard_cases(fx.spec, point, n_controls=3):
        if side == "upper":
            rep = check_dpp_upper(fx, point, nu, alpha, tau, n_paths=100_000, seed=7)
        else:
            rep = check_dpp_lower(fx, point, 0.05, nu, alpha, tau, n_paths=100_000, seed=7)
        counts[rep.verdict] = counts.get(rep.verdict, 0) + 1
    ok = counts.get(PASS, 0) >= 10 and counts.get(FAIL, 0) == 0
    verdict(6, ok, f"{name}: {counts}")


# --------------------------------------------------------------------------
# 7. right-continuity through the switching construction


@pytest.mark.slow
def test_c7_right_continuity_state(verdict):
    fx = solved("geometric")
    rows = []
    for p in fx.probes:
        rep = check_right_continuity(fx, (0.0,) + tuple(p), mode="state", n_paths=100_000, seed=3, n_steps=100)
        rows.append((p[0], rep.extra["monotone"], rep.extra["gaps"][-1], rep.verdict))
    ok = all(mono and gap <= 0.05 for _, mono, gap, _ in rows)
    worst = max(r[2] for r in rows)
    verdict(7, ok, f"{len(rows)} probes, all monotone: {all(r[1] for r in rows)}, worst final gap {worst:.4f}")


# --------------------------------------------------------------------------
# 8. open versus closed


@pytest.mark.slow
def test_c8_open_closed(verdict):
    fx = solved("geometric")
    v = fx.state_value.at(0.0, [1.0])
    rep = check_open_closed(fx, list(fx.probes), n_paths=20_000, seed=0)
    ok = abs(v - math.e) <= 0.1 and rep.estimate <= 0.1
    verdict(8, ok, f"grid value at 1: {v:.4f} (e = {math.e:.4f}), worst |grid - closed MC| {rep.estimate:.4f}")


# --------------------------------------------------------------------------
# 9. class R and Hamiltonian regularity


def test_c9_boundary_checkers(verdict):
    F = fixtures.inward_1d()
    rep = check_class_R_sufficient(F.spec, F.box, n_points=1000, seed=0)
    Q = fixtures.quadratic_sigma()
    reg = check_hamiltonian_regularity(Q.spec, Q.box, budget=2000, seed=0)
    ok = (rep.verdict == PASS and rep.extra["iota"] >= 0.45 and rep.extra["sigma"] == 0.0
          and reg.verdict == FAIL and reg.extra["ratio"] >= 2)
    verdict(9, ok, f"iota {rep.extra['iota']:.3f}, sigma {rep.extra['sigma']:.1e}, "
                   f"quadratic alpha ratio {reg.extra['ratio']:.3g}")


# --------------------------------------------------------------------------
# 10. truncation of the martingale control


@pytest.mark.slow
def test_c10_truncation_stability(verdict):
    small, big = solved("stochastic", A=4.0).value, solved("stochastic", A=8.0).value
    diffs = [abs(small.at(0.0, [x], m) - big.at(0.0, [x], m)) for x, m in fixtures.stochastic().probes]
    worst = max(diffs)
    print(f"A=4 vs A=8 differences: {[round(d, 4) for d in diffs]}")
    verdict(10, worst <= 0.03, f"max |V_A4 - V_A8| = {worst:.4f} (tol 0.03, hard failure above 0.1)")


# --------------------------------------------------------------------------
# 11. reproducibility


def test_c11_reproducible_pipeline(verdict, tmp_path):
    argv = ["verify-dpp", "--fixture", "stochastic", "--nt", "50", "--nx", "51", "--nm", "41",
            "--n-paths", "2000", "--seed", "5", "--probe", "0", "0.5"]
    codes = [run(argv + ["--out", str(tmp_path / k)]) for k in ("a", "b")]
    a, b = ((tmp_path / k / "manifest.tsv").read_text() for k in ("a", "b"))
    n = len(a.splitlines())
    reports = [json.loads(l) for l in (tmp_path / "a" / "reports.jsonl").read_text().splitlines()]
    verdict(11, codes == [0, 0] and a == b and n >= 3 and reports,
            f"exit codes {codes}, {n} manifest entries, identical: {a == b}")
