import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constrained_control import fixtures
from constrained_control.hjb import Grid, HamiltonianParams, PolicyField, ValueField, solve_unconstrained
from constrained_control.hjb.io import (
    FieldFormatError,
    field_from_bytes,
    field_to_bytes,
    field_to_csv,
    read_field,
    write_field,
)
from constrained_control.hjb.residual import max_residual, viscosity_residual
from constrained_control.model import ControlSet, ProblemSpec

NEG_INF = -np.inf


def frozen_field():
    spec = ProblemSpec.build(1, 1.0, ["0"], [["0"]], "x1^2", "x1",
                             ControlSet.box([-1], [1], 3))
    grid = Grid.make(1.0, 10, [-1], [1], 21)
    V, _ = solve_unconstrained(spec, grid)
    return spec, V


def test_frozen_dynamics_zero_residual():
    spec, V = frozen_field()
    np.testing.assert_array_equal(V.values, np.broadcast_to(V.grid.x_axes[0] ** 2, V.values.shape))
    assert max_residual(V, spec, HamiltonianParams()) == 0.0


def test_residual_shift_under_time_perturbation():
    spec, V = frozen_field()
    g = V.grid
    bumped = ValueField(g, V.values + 0.1 * (g.T - g.times)[:, None], V.masked, V.kind, dict(V.meta))
    P = HamiltonianParams()
    for node in [(0, 5), (3, 10), (8, 15)]:
        assert viscosity_residual(bumped, spec, P, node) - viscosity_residual(V, spec, P, node) == pytest.approx(0.1)


def test_residual_inapplicable_at_edges_and_last_slice():
    spec, V = frozen_field()
    P = HamiltonianParams()
    assert viscosity_residual(V, spec, P, (V.grid.nt, 5)) is None
    assert viscosity_residual(V, spec, P, (0, 0)) is None
    masked = ValueField(V.grid, V.values.copy(), V.masked.copy(), V.kind, {})
    masked.values[0, 6] = NEG_INF
    masked.masked[0, 6] = True
    assert viscosity_residual(masked, spec, P, (0, 5)) is None


def test_residual_first_order_under_refinement():
    F = fixtures.unconstrained()
    P = HamiltonianParams(**F.params)
    res = []
    for nx, nt in ((41, 40), (81, 80)):
        grid = Grid.make(1.0, nt, [-2.0], [2.0], nx)
        V, _ = solve_unconstrained(F.spec, grid, P)
        h = max(grid.h_x[0], grid.h_t)
        res.append(max_residual(V, F.spec, P, region=[(-1.0, 1.0)]) / h)
    # the constant in ``residual <= C h`` does not grow under refinement
    assert res[1] <= 1.5 * res[0] + 1e-9


# --------------------------------------------------------------------------
# export


def small_field(values, masked, with_m, with_policy):
    nt, nx = values.shape[0] - 1, values.shape[1]
    grid = Grid.make(1.0, nt, [-1.0], [1.0], nx, *((-1.0, 1.0, values.shape[2]) if with_m else ()))
    vals = np.where(masked, NEG_INF, values)
    fld = ValueField(grid, vals, masked, "constrained" if with_m else "state", {"A": 2.0, "note": "x"})
    pol = None
    if with_policy:
        pol = PolicyField(grid, values[..., None] * 0.5, values[..., None] if with_m else None)
    return fld, pol


@st.composite
def fields(draw):
    with_m = draw(st.booleans())
    shape = (draw(st.integers(2, 4)), draw(st.integers(2, 5))) + ((draw(st.integers(2, 4)),) if with_m else ())
    n = int(np.prod(shape))
    vals = np.array(draw(st.lists(st.floats(-1e6, 1e6), min_size=n, max_size=n))).reshape(shape)
    masked = np.array(draw(st.lists(st.booleans(), min_size=n, max_size=n))).reshape(shape)
    return small_field(vals, masked, with_m, draw(st.booleans()))


@settings(max_examples=60, deadline=None)
@given(fields())
def test_binary_round_trip(fp):
    fld, pol = fp
    back, bpol = field_from_bytes(field_to_bytes(fld, pol))
    assert back.grid == fld.grid and back.kind == fld.kind and back.meta == fld.meta
    np.testing.assert_array_equal(back.values, fld.values)
    np.testing.assert_array_equal(back.masked, fld.masked)
    if pol is None:
        assert bpol is None
    else:
        np.testing.assert_array_equal(bpol.u, pol.u)
        assert (bpol.a is None) == (pol.a is None)


def test_binary_rejects_garbage():
    with pytest.raises(FieldFormatError):
        field_from_bytes(b"NOTAFIELD" + bytes(40))
    fld, pol = small_field(np.zeros((2, 3)), np.zeros((2, 3), bool), False, False)
    data = field_to_bytes(fld, pol)
    with pytest.raises(FieldFormatError):
        field_from_bytes(data[:-3])


def test_binary_header_layout():
    fld, _ = small_field(np.zeros((3, 4, 2)), np.zeros((3, 4, 2), bool), True, False)
    data = field_to_bytes(fld)
    assert data[:8] == b"CCVFLD01"
    d, has_m, ku, ka = np.frombuffer(data[8:24], "<u4")
    assert (d, has_m, ku, ka) == (1, 1, 0, 0)


def test_csv_columns_and_rows():
    fld, pol = small_field(np.arange(12.0).reshape(2, 3, 2), np.zeros((2, 3, 2), bool), True, True)
    text = field_to_csv(fld, pol)
    lines = text.strip().splitlines()
    assert lines[0] == "t,x1,m,value,masked,u1,a1"
    assert len(lines) == 1 + 12


def test_write_and_read(tmp_path):
    fld, pol = small_field(np.ones((2, 3)), np.zeros((2, 3), bool), False, True)
    write_field(tmp_path / "f.bin", fld, pol, fmt="bin")
    back, bpol = read_field(tmp_path / "f.bin")
    np.testing.assert_array_equal(back.values, fld.values)
    write_field(tmp_path / "f.csv", fld, pol, fmt="csv")
    assert (tmp_path / "f.csv").read_text().startswith("t,x1,value")
