import functools

from constrained_control import fixtures
from constrained_control.dpp import TestFixture
from constrained_control.hjb import (
    Grid,
    HamiltonianParams,
    solve_expectation_constrained,
    solve_state_constrained,
)


@functools.lru_cache(maxsize=None)
def solved(name, **overrides):
    """Solved test fixture for a named problem, cached for the session."""
    F = fixtures.get(name)
    P = HamiltonianParams(**{**F.params, **overrides})
    grid = Grid.make(**F.grid)
    if F.spec.domain is not None:
        V, pol = solve_state_constrained(F.spec, grid, P)
        return TestFixture(F.spec, P, state_value=V, state_policy=pol, probes=F.probes)
    V, pol, fl = solve_expectation_constrained(F.spec, grid, P)
    return TestFixture(F.spec, P, value=V, floor=fl, policy=pol, probes=F.probes)
