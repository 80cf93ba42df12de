"""Grid solvers for the floor, constrained and state-constrained problems."""

from .grid import NEG_INF, Grid, PolicyField, ValueField, interpolate
from .hamiltonian import HamiltonianParams, hamiltonian, hamiltonian_state
from .solver import (
    CFLError,
    GridBudgetError,
    extract_policy,
    solve_constraint_floor,
    solve_expectation_constrained,
    solve_state_constrained,
    solve_unconstrained,
)
