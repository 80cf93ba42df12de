import math

import numpy as np
import pytest
from scipy.stats import norm

from constrained_control import fixtures
from constrained_control.hjb import (
    NEG_INF,
    CFLError,
    Grid,
    GridBudgetError,
    HamiltonianParams,
    extract_policy,
    hamiltonian,
    hamiltonian_state,
    solve_constraint_floor,
    solve_expectation_constrained,
    solve_state_constrained,
    solve_unconstrained,
)
from constrained_control.model import ControlSet, ProblemSpec


def spec1(drift="u1", sigma="1", f="x1", g="x1", U=(-1, 1), n_u=3, **kw):
    return ProblemSpec.build(1, 1.0, [drift], [[sigma]], f, g, ControlSet.box([U[0]], [U[1]], n_u), **kw)


# --------------------------------------------------------------------------
# Hamiltonian


def test_hamiltonian_martingale_edge_tie():
    spec = ProblemSpec.build(1, 1.0, ["0"], [["0"]], "x1", "x1", ControlSet.finite([[0.0]]))
    val, (u, a) = hamiltonian(spec, HamiltonianParams(A=2.0), [0.0], [0.0, 0.0], [[0, 0], [0, 1.0]])
    assert val == pytest.approx(-2.0)
    assert a[0] == -2.0


def test_hamiltonian_drift_only():
    spec = ProblemSpec.build(1, 1.0, ["u1"], [["1"]], "x1", "x1", ControlSet.finite([[-1.0], [1.0]]))
    val, (u, a) = hamiltonian(spec, HamiltonianParams(A=3.0), [0.0], [1.0, 0.0], np.zeros((2, 2)))
    assert val == pytest.approx(-1.0)
    assert u[0] == 1.0


def test_hamiltonian_interior_martingale_minimiser():
    # -(1/2)(qxx + 2 a qxm + a^2 qmm) is minimised at a* = -qxm / qmm when qmm < 0
    qxx, qxm, qmm = 0.3, 0.5, -1.0
    spec = ProblemSpec.build(1, 1.0, ["0"], [["1"]], "x1", "x1", ControlSet.finite([[0.0]]))
    val, (u, a) = hamiltonian(spec, HamiltonianParams(A=2.0), [0.0], [0.0, 0.0], [[qxx, qxm], [qxm, qmm]])
    a_star = -qxm / qmm
    assert a[0] == pytest.approx(a_star)
    assert val == pytest.approx(-0.5 * (qxx + 2 * a_star * qxm + a_star ** 2 * qmm))


def test_state_hamiltonian_examples():
    single = ProblemSpec.build(1, 1.0, ["2*x1"], [["3"]], "x1", "x1", ControlSet.finite([[0.5]]))
    val, u = hamiltonian_state(single, HamiltonianParams(), [1.0], [0.7], [[0.2]])
    assert val == pytest.approx(-(2 * 0.7 + 0.5 * 9 * 0.2))
    lin = spec1(sigma="0", n_u=21)
    val, u = hamiltonian_state(lin, HamiltonianParams(), [0.0], [1.0], [[0.0]])
    assert val == pytest.approx(-1.0) and u[0] == 1.0
    geo = fixtures.geometric().spec
    val, u = hamiltonian_state(geo, HamiltonianParams(), [2.0], [1.0], [[-0.25]])
    assert val == pytest.approx(-1.5) and u[0] == 1.0


def test_params_validation():
    with pytest.raises(ValueError):
        HamiltonianParams(A=0.0)
    with pytest.raises(ValueError):
        HamiltonianParams(a_points=4)
    np.testing.assert_array_equal(HamiltonianParams(a_points=1).a_values(), [0.0])
    vals = HamiltonianParams(A=1.0, a_points=5).a_values()
    np.testing.assert_array_equal(vals, [0.0, -0.5, 0.5, -1.0, 1.0])


# --------------------------------------------------------------------------
# constraint floor


def test_floor_of_zero_constraint_is_zero():
    spec = spec1(g="0")
    v = solve_constraint_floor(spec, Grid.make(1.0, 50, [-2], [2], 41))
    assert np.all(v.values == 0.0)


def test_floor_linear_deterministic():
    spec = spec1(sigma="0", n_u=21)
    grid = Grid.make(1.0, 50, [-2], [2], 81)
    v = solve_constraint_floor(spec, grid)
    x, t = grid.x_axes[0], grid.times
    exact = x[None, :] - (1 - t)[:, None]
    inner = (x >= -0.9) & (x <= 0.9)
    assert np.max(np.abs(v.values[:, inner] - exact[:, inner])) <= 2 * grid.h_x[0]


def test_floor_probability_constraint():
    F = fixtures.prob_constraint()
    grid = Grid.make(**{k: v for k, v in F.grid.items() if not k.startswith("m_") and k != "nm"})
    v = solve_constraint_floor(F.spec, grid)
    assert abs(v.at(0.0, [0.0]) - norm.cdf(-1)) <= 0.02
    assert v.kind == "floor"


# --------------------------------------------------------------------------
# constrained value


@pytest.fixture(scope="module")
def det_field():
    spec = spec1(sigma="0", n_u=21)
    grid = Grid.make(1.0, 50, [-2], [2], 101, -2, 2, 51)
    V, pol, fl = solve_expectation_constrained(spec, grid, HamiltonianParams(A=2.0, a_points=1))
    return spec, V, pol, fl


@pytest.mark.parametrize("m", [-0.5, 0.0, 0.5, 0.9])
def test_deterministic_value_min_m_one(det_field, m):
    _, V, _, _ = det_field
    assert abs(V.at(0.0, [0.0], m) - min(m, 1.0)) <= 0.05


def test_mask_below_floor(det_field):
    _, V, _, fl = det_field
    g = V.grid
    floor = fl.values[..., None]
    margin = V.meta["mask_margin"]
    below = g.m_axis[None, None, :] < floor - margin - 1e-9
    assert np.all(V.values[below] == NEG_INF)
    assert np.all(V.masked[below])
    assert V.check_invariants()


def test_top_slice_matches_unconstrained():
    F = fixtures.unconstrained()
    grid = Grid.make(**F.grid)
    P = HamiltonianParams(**F.params)
    V, _, _ = solve_expectation_constrained(F.spec, grid, P)
    U, _ = solve_unconstrained(F.spec, grid.x_grid(), P)
    inner = slice(20, 181)
    assert np.max(np.abs(V.values[:, inner, -1] - U.values[:, inner])) <= 2 * grid.h_x[0]
    exact = grid.x_axes[0][inner][None, :] + (1 - grid.times)[:, None]
    assert np.max(np.abs(U.values[:, inner] - exact)) <= 0.02


# --------------------------------------------------------------------------
# state constraint


def test_state_without_domain_equals_unconstrained():
    spec = spec1("u1", "0.5", f="min(x1, 1)")
    grid = Grid.make(1.0, 40, [-2], [2], 41)
    A, _ = solve_state_constrained(spec, grid)
    B, _ = solve_unconstrained(spec, grid)
    np.testing.assert_array_equal(A.values, B.values)


def test_state_constant_reward():
    geo = fixtures.geometric()
    spec = geo.spec.with_reward("3.5")
    V, _ = solve_state_constrained(spec, Grid.make(**geo.grid), HamiltonianParams(**geo.params))
    np.testing.assert_allclose(V.values[~V.masked], 3.5, atol=1e-12)


def test_state_geometric_value():
    geo = fixtures.geometric()
    V, _ = solve_state_constrained(geo.spec, Grid.make(**geo.grid), HamiltonianParams(**geo.params))
    assert abs(V.at(0.0, [1.0]) - math.e) <= 0.05


# --------------------------------------------------------------------------
# policies


def test_singleton_policy():
    spec = ProblemSpec.build(1, 1.0, ["u1"], [["1"]], "x1", "x1", ControlSet.finite([[0.25]]))
    _, pol = solve_unconstrained(spec, Grid.make(1.0, 20, [-1], [1], 21))
    assert np.all(pol.u == 0.25)


def test_linear_reward_drives_up():
    spec = spec1(n_u=21)
    grid = Grid.make(1.0, 50, [-2], [2], 41)
    _, pol = solve_unconstrained(spec, grid)
    assert np.all(pol.u[:, 1:-1, 0] == 1.0)


def test_drive_to_zero_policy_sign():
    spec = spec1(f="0 - x1^2", sigma="0.5", n_u=21)
    grid = Grid.make(1.0, 50, [-2], [2], 41)
    _, pol = solve_unconstrained(spec, grid)
    x = grid.x_axes[0]
    off_band = (np.abs(x) > grid.h_x[0] + 1e-12) & (np.abs(x) < 1.9)
    u = pol.u[:-1, off_band, 0]
    assert np.all(np.sign(u) == -np.sign(x[off_band])[None, :])


def test_extract_policy_reproduces_solver_policy(det_field):
    spec, V, pol, fl = det_field
    again = extract_policy(V, spec, HamiltonianParams(A=2.0, a_points=1), floor=fl)
    np.testing.assert_array_equal(again.u, pol.u)


# --------------------------------------------------------------------------
# guards and discretisation


def test_strict_cfl_raises():
    spec = spec1(sigma="2")
    grid = Grid.make(1.0, 5, [-2], [2], 201)
    with pytest.raises(CFLError) as info:
        solve_unconstrained(spec, grid, HamiltonianParams(cfl_mode="strict"))
    assert info.value.dt_max < grid.h_t


def test_budget_guard():
    with pytest.raises(GridBudgetError):
        solve_unconstrained(spec1(), Grid.make(1.0, 10, [-1], [1], 101), HamiltonianParams(max_nodes=100))


def test_refinement_is_consistent():
    # f = x, mu = u in [0, 1], sigma = 1: exact value x + 1 at t = 0
    spec = spec1(U=(0, 1), f="x1")
    errs = []
    for nx, nt in ((21, 20), (41, 40), (81, 80)):
        V, _ = solve_unconstrained(spec, Grid.make(1.0, nt, [-2], [2], nx),
                                   HamiltonianParams(boundary="extrapolate"))
        errs.append(abs(V.at(0.0, [0.3]) - 1.3))
    assert errs[1] <= errs[0] * 1.1 + 1e-12 and errs[2] <= errs[1] * 1.1 + 1e-12


def test_extrapolate_boundary_keeps_linear_field():
    spec = spec1(U=(0, 1))
    grid = Grid.make(1.0, 40, [-1], [1], 41)
    ext, _ = solve_unconstrained(spec, grid, HamiltonianParams(boundary="extrapolate"))
    exact = grid.x_axes[0][None, :] + (1 - grid.times)[:, None]
    np.testing.assert_allclose(ext.values, exact, atol=1e-9)


def test_constrained_field_nondecreasing_in_m():
    spec = spec1(sigma="0.2", n_u=5)
    grid = Grid.make(1.0, 40, [-2], [2], 41, -2, 2, 41)
    V, _, _ = solve_expectation_constrained(spec, grid, HamiltonianParams(A=2.0, a_points=5))
    both = ~V.masked[..., 1:] & ~V.masked[..., :-1]
    assert np.all(V.values[..., 1:][both] >= V.values[..., :-1][both] - 1e-12)
    assert 0.0 <= V.meta["m_monotone_repair"] < grid.h_m
