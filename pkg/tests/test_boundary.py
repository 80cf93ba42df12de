import numpy as np
import pytest

from constrained_control import fixtures
from constrained_control.boundary import (
    BoundaryProbe,
    build_inward_curve,
    check_class_R_sufficient,
    check_feedback_invariance,
    check_hamiltonian_regularity,
)
from constrained_control.model import ControlSet, Domain, ProblemSpec, SpecError
from constrained_control.reports import FAIL, PASS

EPS = [0.01, 0.02, 0.05, 0.1]


def inward(**kw):
    args = dict(drift="0.5 - x1", sigma="abs(u1 - x1)", delta="x1*(1 - x1)")
    args.update(kw)
    return ProblemSpec.build(1, 1.0, [args["drift"]], [[args["sigma"]]], "x1", "0", ControlSet.box([0], [1], 11),
                             domain=Domain.level(1, args["delta"]), admissible_feedback=["x1"],
                             inward_feedback=["x1"], reward_bounded=True)


# --------------------------------------------------------------------------
# invariance


def test_invariance_geometric_zero_violations():
    F = fixtures.geometric()
    rep = check_feedback_invariance(F.spec, [(0.5,), (1.0,)], n_paths=10_000, seed=0)
    assert rep.verdict == PASS and rep.estimate == 0.0


def test_invariance_outward_drift_fails():
    F = fixtures.outward()
    rep = check_feedback_invariance(F.spec, F.probes, n_paths=1_000, seed=0)
    assert rep.verdict == FAIL and rep.estimate > 0


def test_invariance_without_domain_is_vacuous():
    rep = check_feedback_invariance(fixtures.linear().spec, [(0.0,)])
    assert rep.verdict == PASS


# --------------------------------------------------------------------------
# inward curve


def test_inward_curve_constant_field_exact():
    spec = inward(drift="0.3")
    curve = build_inward_curve(spec, [0.0], EPS)
    np.testing.assert_allclose(curve.offsets()[:, 0], 0.3 * np.array(EPS), rtol=0, atol=1e-15)
    assert curve.lam == tuple(EPS)


def test_inward_curve_enters_domain():
    spec = fixtures.inward_1d().spec
    probe = BoundaryProbe.at(spec, [0.0])
    assert probe.normal[0] == pytest.approx(1.0)
    curve = build_inward_curve(spec, probe, EPS)
    x = curve.offsets()[:, 0]
    assert np.all(spec.domain.delta(x[:, None]) >= 0.4 * np.array(EPS))
    # the offsets stay of order eps
    assert np.all(np.abs(x) / EPS <= 2 * 0.5)


def test_inward_curve_needs_law():
    spec = fixtures.linear().spec
    with pytest.raises(SpecError):
        build_inward_curve(spec, [0.0], EPS)


def test_inward_curve_blow_up():
    spec = inward(drift="x1^2")
    with pytest.raises(FloatingPointError):
        build_inward_curve(spec, [1.0], [0.5, 2.0])


def test_probe_rejects_flat_gradient():
    spec = inward(delta="1 - x1^2")
    with pytest.raises(ValueError):
        BoundaryProbe.at(spec, [0.0])


# --------------------------------------------------------------------------
# class R


def test_class_R_passes_on_inward_fixture():
    F = fixtures.inward_1d()
    rep = check_class_R_sufficient(F.spec, F.box, n_points=1000, seed=0)
    assert rep.verdict == PASS
    assert rep.extra["iota"] >= 0.45
    assert rep.extra["sigma"] == 0.0


def test_class_R_flipped_sign_fails():
    spec = inward(delta="x1*(x1 - 1)")
    rep = check_class_R_sufficient(spec, [(-0.2, 1.2)], n_points=200, seed=0)
    assert rep.verdict == FAIL and rep.extra["iota"] < 0


def test_class_R_diffusion_witness():
    spec = inward(sigma="0.1 + abs(u1 - x1)")
    rep = check_class_R_sufficient(spec, [(-0.2, 1.2)], n_points=200, seed=0)
    assert rep.verdict == FAIL
    w = rep.extra["witness_sigma"]
    assert w is not None and spec.domain.delta(np.array([w]))[0] >= 0


def test_class_R_monotone_in_tol():
    spec = inward(sigma="0.1 + abs(u1 - x1)")
    assert check_class_R_sufficient(spec, [(-0.2, 1.2)], n_points=200, tol=0.2).verdict == PASS
    assert check_class_R_sufficient(spec, [(-0.2, 1.2)], n_points=200, tol=0.5).verdict == PASS


def test_class_R_empty_box():
    F = fixtures.inward_1d()
    with pytest.raises(ValueError):
        check_class_R_sufficient(F.spec, [(0.3, 0.6)], n_points=10)


# --------------------------------------------------------------------------
# regularity


def test_regularity_linear_is_stable():
    F = fixtures.linear()
    small = check_hamiltonian_regularity(F.spec, F.box, budget=1000, seed=0)
    big = check_hamiltonian_regularity(F.spec, F.box, budget=2000, seed=0)
    assert small.verdict == PASS and big.verdict == PASS
    assert big.estimate / small.estimate <= 1.2


def test_regularity_quadratic_sigma_fails():
    F = fixtures.quadratic_sigma()
    rep = check_hamiltonian_regularity(F.spec, F.box, budget=2000, seed=0)
    assert rep.verdict == FAIL
    assert rep.extra["ratio"] >= 2


def test_regularity_is_seeded():
    F = fixtures.linear()
    a = check_hamiltonian_regularity(F.spec, F.box, budget=500, seed=3)
    b = check_hamiltonian_regularity(F.spec, F.box, budget=500, seed=3)
    assert a.to_text() == b.to_text()
