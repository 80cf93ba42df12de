import math

import numpy as np
import pytest

from conftest import solved
from constrained_control import fixtures
from constrained_control.dpp import (
    TestFixture,
    check_dpp_lower,
    check_dpp_upper,
    check_open_closed,
    check_right_continuity,
    standard_cases,
    tracking_martingale,
)
from constrained_control.hjb import Grid, HamiltonianParams, solve_state_constrained
from constrained_control.model import ControlSet, ProblemSpec
from constrained_control.reports import FAIL, INCONCLUSIVE, PASS, VerificationReport
from constrained_control.sde import (
    AtTime,
    Constant,
    ExitRegion,
    Immediate,
    MartingaleProgram,
    Region,
    Terminal,
    TimeGrid,
    simulate_paths,
)

POINT = (0.0, 0.0, 0.5)
ALPHA = MartingaleProgram(Constant(0.2))


def test_upper_exit_example():
    fx = solved("stochastic")
    tau = ExitRegion(Region(x=((-0.4, 0.4),)))
    rep = check_dpp_upper(fx, POINT, Constant(0.3), ALPHA, tau, n_paths=100_000, seed=1)
    assert rep.verdict == PASS
    assert rep.slack >= -3 * rep.se


def test_upper_immediate_and_terminal():
    fx = solved("stochastic")
    imm = check_dpp_upper(fx, POINT, Constant(0.3), ALPHA, Immediate(), n_paths=20_000, seed=2)
    assert imm.slack >= -2 * imm.se - 2 * fx.grid_error
    term = check_dpp_upper(fx, POINT, Constant(0.3), ALPHA, Terminal(), n_paths=20_000, seed=2)
    assert abs(term.slack) <= 2 * term.se + 1e-12


def test_upper_rejects_inadmissible_input():
    fx = solved("stochastic")
    rep = check_dpp_upper(fx, POINT, Constant(1.0), None, Terminal(), n_paths=2_000, seed=0)
    assert rep.verdict == INCONCLUSIVE
    assert "inadmissible input" in rep.notes


def test_lower_deterministic_half_time():
    fx = solved("deterministic")
    h = fx.grid_error
    for u in (-1.0, 0.0, 0.5):
        rep = check_dpp_lower(fx, POINT, 0.05, Constant(u), None, AtTime(0.5), n_paths=50, seed=0)
        assert rep.se <= 1e-12
        assert rep.slack >= -h


def test_lower_delta_zero_is_flagged():
    fx = solved("deterministic")
    rep = check_dpp_lower(fx, POINT, 0.0, Constant(0.5), None, AtTime(0.5), n_paths=50, seed=0)
    assert rep.slack >= -fx.grid_error - 3 * rep.se
    assert any("stronger-than-theorem" in n for n in rep.notes)


def test_lower_slack_nondecreasing_in_delta():
    fx = solved("stochastic")
    slacks = [check_dpp_lower(fx, POINT, d, Constant(0.2), None, AtTime(0.5), n_paths=5_000, seed=4).slack
              for d in (0.0, 0.05, 0.1, 0.2)]
    assert all(b >= a for a, b in zip(slacks, slacks[1:]))


def test_lower_rejects_masked_point():
    fx = solved("deterministic")
    with pytest.raises(ValueError):
        check_dpp_lower(fx, (0.0, 0.0, -1.9), 0.05, Constant(0.0), None, Terminal(), n_paths=10)


def test_standard_cases_cover_both_sides():
    spec = fixtures.stochastic().spec
    cases = standard_cases(spec, POINT)
    sides = [c[0] for c in cases]
    assert sides.count("upper") == 15 and sides.count("lower") == 30


def test_tracking_martingale_makes_affine_constraint_pathwise():
    spec = fixtures.drive_to_zero().spec
    u = 0.5
    b = simulate_paths(spec, 0.0, [0.0], 0.5, math.inf, Constant(u), tracking_martingale(spec, u),
                       TimeGrid(0, 1, 50), 2_000, 3)
    np.testing.assert_allclose(b.M[:, -1] - b.X[:, -1, 0], 0.5 - u, atol=1e-6)


def test_reports_reproducible():
    fx = solved("stochastic")
    tau = ExitRegion(Region(x=((-0.4, 0.4),)))
    a = check_dpp_upper(fx, POINT, Constant(0.3), ALPHA, tau, n_paths=5_000, seed=9)
    b = check_dpp_upper(fx, POINT, Constant(0.3), ALPHA, tau, n_paths=5_000, seed=9)
    assert a.to_text() == b.to_text()


def test_report_text_round_trip():
    rep = VerificationReport("dpp_upper", (0.0, 0.0, 0.5), 0.51, 3e-4, -math.inf, FAIL, 100, (7,), 0.05,
                             ["a"], {"gaps": [0.1, math.nan]})
    back = VerificationReport.from_text(rep.to_text())
    assert back.slack == -math.inf and math.isnan(back.extra["gaps"][1])
    assert back.to_text() == rep.to_text()


# --------------------------------------------------------------------------
# right-continuity


def test_right_continuity_probability_constraint():
    fx = solved("prob_constraint")
    rep = check_right_continuity(fx, (0.0, 0.5, 0.3))
    gaps = rep.extra["gaps"]
    assert rep.verdict == PASS, gaps
    assert gaps[-1] <= 0.05


def test_right_continuity_inactive_constraint():
    fx = solved("stochastic")
    rep = check_right_continuity(fx, (0.0, 0.0, 1.9))
    assert max(abs(g) for g in rep.extra["gaps"]) <= 2 * fx.grid_error


def test_right_continuity_assumptions_gate():
    spec = ProblemSpec.build(1, 1.0, ["u1"], [["x1^2"]], "x1", "x1", ControlSet.box([-1], [1], 3))
    fx = TestFixture(spec)
    rep = check_right_continuity(fx, (0.0, 0.0, 0.3), box=[(-10.0, 10.0)])
    assert rep.verdict == INCONCLUSIVE
    assert "assumptions unmet" in rep.notes[0]


# --------------------------------------------------------------------------
# open versus closed


def test_open_closed_whole_space():
    spec = ProblemSpec.build(1, 1.0, ["u1"], [["1"]], "x1", "0", ControlSet.box([0], [1], 3))
    grid = Grid.make(1.0, 100, [-3.0], [3.0], 121)
    V, pol = solve_state_constrained(spec, grid, HamiltonianParams(boundary="extrapolate"))
    fx = TestFixture(spec, state_value=V, state_policy=pol)
    rep = check_open_closed(fx, [(0.0,), (0.5,)], n_paths=5_000, seed=0)
    assert rep.estimate <= 3 * rep.se + 2 * grid.h_x[0]


def test_open_closed_geometric():
    fx = solved("geometric")
    rep = check_open_closed(fx, [(1.0,), (0.0,)], n_paths=20_000, seed=0)
    row = rep.extra["probes"][0]
    assert abs(row["mc"] - math.e) <= 0.1
    assert "one_sided_limit" in rep.extra["probes"][1]
    assert rep.verdict == PASS
