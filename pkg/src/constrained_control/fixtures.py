"""Named desk-scale problems with default grids and probe points."""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import ControlSet, Domain, ProblemSpec


@dataclass(frozen=True)
class FixtureDef:
    name: str
    spec: ProblemSpec
    grid: dict = field(default_factory=dict)  # keyword arguments of Grid.make
    params: dict = field(default_factory=dict)  # keyword arguments of HamiltonianParams
    box: tuple = ()  # validation box, one (lo, hi) pair per axis
    probes: tuple = ()


def deterministic() -> FixtureDef:
    spec = ProblemSpec.build(1, 1.0, ["u1"], [["0"]], "x1", "x1", ControlSet.box([-1], [1], 21),
                             name="deterministic")
    return FixtureDef("deterministic", spec,
                      dict(T=1.0, nt=50, x_lower=[-2.0], x_upper=[2.0], nx=101, m_lower=-2.0, m_upper=2.0, nm=101),
                      dict(A=2.0, a_points=21), ((-2.0, 2.0),),
                      tuple((0.0, m) for m in (-0.5, 0.0, 0.25, 0.5, 0.9, 1.5)))


def stochastic() -> FixtureDef:
    spec = ProblemSpec.build(1, 1.0, ["u1"], [["0.2"]], "x1", "x1", ControlSet.box([-1], [1], 21),
                             name="stochastic")
    return FixtureDef("stochastic", spec,
                      dict(T=1.0, nt=100, x_lower=[-2.5], x_upper=[2.5], nx=101, m_lower=-2.0, m_upper=2.0, nm=81),
                      dict(A=2.0, a_points=21), ((-2.5, 2.5),),
                      tuple((0.0, m) for m in (-0.5, 0.0, 0.25, 0.5, 0.9)))


def prob_constraint() -> FixtureDef:
    spec = ProblemSpec.build(1, 1.0, ["u1"], [["1"]], "x1", "indicator_leq0(x1)", ControlSet.box([-1], [1], 3),
                             name="prob_constraint")
    return FixtureDef("prob_constraint", spec,
                      dict(T=1.0, nt=100, x_lower=[-5.0], x_upper=[5.0], nx=201, m_lower=0.0, m_upper=1.0, nm=21),
                      dict(A=2.0, a_points=11, boundary="extrapolate"), ((-5.0, 5.0),),
                      ((0.0, 0.3), (0.5, 0.3)))


def drive_to_zero() -> FixtureDef:
    spec = ProblemSpec.build(1, 1.0, ["u1"], [["0.5"]], "0 - x1^2", "x1", ControlSet.box([-1], [1], 21),
                             name="drive_to_zero")
    return FixtureDef("drive_to_zero", spec,
                      dict(T=1.0, nt=100, x_lower=[-2.5], x_upper=[2.5], nx=101, m_lower=-2.0, m_upper=2.0, nm=81),
                      dict(A=2.0, a_points=21), ((-2.5, 2.5),),
                      ((0.5, 0.2), (-0.5, 0.0)))


def unconstrained() -> FixtureDef:
    spec = ProblemSpec.build(1, 1.0, ["u1"], [["1"]], "x1", "0", ControlSet.box([0], [1], 3), name="unconstrained")
    return FixtureDef("unconstrained", spec,
                      dict(T=1.0, nt=100, x_lower=[-3.0], x_upper=[3.0], nx=201, m_lower=-1.0, m_upper=1.0, nm=21),
                      dict(A=2.0, a_points=21, boundary="extrapolate"), ((-3.0, 3.0),), ((0.0,),))


def geometric() -> FixtureDef:
    spec = ProblemSpec.build(1, 1.0, ["u1*x1"], [["x1"]], "x1", "0", ControlSet.box([0], [1], 2),
                             domain=Domain.halfspace([1.0]), admissible_feedback=["0"], log_coords=(0,),
                             name="geometric")
    return FixtureDef("geometric", spec, dict(T=1.0, nt=200, x_lower=[0.0], x_upper=[5.0], nx=126),
                      dict(boundary="extrapolate"), ((0.1, 5.0),),
                      ((0.25,), (0.5,), (0.75,), (1.0,), (1.5,)))


def inward_1d() -> FixtureDef:
    spec = ProblemSpec.build(1, 1.0, ["0.5 - x1"], [["abs(u1 - x1)"]], "x1", "0", ControlSet.box([0], [1], 11),
                             domain=Domain.level(1, "x1*(1 - x1)"), admissible_feedback=["x1"],
                             inward_feedback=["x1"], reward_bounded=True, name="inward_1d")
    return FixtureDef("inward_1d", spec, dict(T=1.0, nt=100, x_lower=[0.0], x_upper=[1.0], nx=51), {},
                      ((-0.2, 1.2),), ((0.0,), (1.0,)))


def quadratic_sigma() -> FixtureDef:
    spec = ProblemSpec.build(1, 1.0, ["u1"], [["x1^2"]], "x1", "x1", ControlSet.box([-1], [1], 5),
                             name="quadratic_sigma")
    return FixtureDef("quadratic_sigma", spec, {}, {}, ((-10.0, 10.0),))


def linear() -> FixtureDef:
    spec = ProblemSpec.build(1, 1.0, ["u1"], [["1"]], "x1", "x1", ControlSet.box([-1], [1], 5), name="linear")
    return FixtureDef("linear", spec, {}, {}, ((-10.0, 10.0),))


def outward() -> FixtureDef:
    spec = ProblemSpec.build(1, 1.0, ["0 - 1"], [["0"]], "x1", "0", ControlSet.box([0], [1], 2),
                             domain=Domain.halfspace([1.0]), admissible_feedback=["0"], name="outward")
    return FixtureDef("outward", spec, {}, {}, ((0.0, 2.0),), ((0.05,),))


FIXTURES = {f.__name__: f for f in (deterministic, stochastic, prob_constraint, drive_to_zero, unconstrained,
                                    geometric, inward_1d, quadratic_sigma, linear, outward)}


def get(name: str) -> FixtureDef:
    try:
        return FIXTURES[name]()
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; known: {', '.join(sorted(FIXTURES))}") from None
