from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from constrained_control import fixtures, specfile
from constrained_control.model import ControlSet, Domain, ProblemSpec
from constrained_control.specfile import SpecFileError

FIXTURE_DIR = Path(__file__).resolve().parents[1] / "fixtures"
SHIPPED = sorted(p.stem for p in FIXTURE_DIR.glob("*.toml"))


def test_fixture_files_present():
    assert {"deterministic", "stochastic", "prob_constraint", "geometric", "inward_1d"} <= set(SHIPPED)


@pytest.mark.parametrize("name", SHIPPED)
def test_shipped_file_matches_builtin(name):
    spec, grid = specfile.load(FIXTURE_DIR / f"{name}.toml")
    F = fixtures.get(name)
    assert specfile.dumps(spec) == specfile.dumps(F.spec)
    assert grid["nt"] == F.grid["nt"] and grid["nx"] == F.grid["nx"]
    x = np.array([[0.3]] * F.spec.dim).T
    u = F.spec.controls.grid()[:1]
    np.testing.assert_allclose(spec.mu(x, u), F.spec.mu(x, u))


@pytest.mark.parametrize("name", sorted(fixtures.FIXTURES))
def test_dump_load_round_trip(name):
    F = fixtures.get(name)
    text = specfile.dumps(F.spec)
    spec, _ = specfile.loads(text)
    assert specfile.dumps(spec) == text


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10), st.floats(-3, 0), st.floats(0.1, 3), st.integers(1, 9),
       st.sampled_from([None, "halfspace", "ball", "level"]), st.booleans())
def test_generated_round_trip(T, lo, width, n_u, dom, bounded):
    domain = {None: None, "halfspace": Domain.halfspace([1.0], 0.5), "ball": Domain.ball([0.0], 2.0),
              "level": Domain.level(1, "1 - x1^2")}[dom]
    spec = ProblemSpec.build(1, T, [f"{lo}*x1 + u1"], [["0.3"]], "min(x1, 1)", "x1",
                             ControlSet.box([lo], [lo + width], n_u), domain=domain, reward_bounded=bounded)
    grid = {"nt": 10, "nx": 21, "A": 2.0, "probes": [[0.0]]}
    text = specfile.dumps(spec, grid)
    again, g2 = specfile.loads(text)
    assert specfile.dumps(again, g2) == text
    assert g2 == grid
    assert again.horizon == T and again.reward_bounded == bounded


GOOD = """[problem]
dim = 1
horizon = 1.0
[dynamics]
drift = ["u1"]
diffusion = "1"
[objective]
reward = "x1"
[constraint]
function = "x1"
[controls]
kind = "box"
lower = [-1]
upper = [1]
"""


def test_minimal_file():
    spec, grid = specfile.loads(GOOD)
    assert spec.dim == 1 and grid == {}


@pytest.mark.parametrize("text, line", [
    (GOOD.replace('drift = ["u1"]', 'drift = ["u1"'), 5),
    (GOOD.replace('reward = "x1"', 'reward = "x1 +"'), 8),
    (GOOD.replace("[objective]", "[objectiv]"), 7),
    (GOOD.replace("horizon = 1.0", "horizon = 1.0\nspeed = 2"), 4),
    (GOOD.replace('kind = "box"', "kind box"), 12),
    (GOOD + "dim = 2\n", 15),
    (GOOD.replace("dim = 1", "dim = 1\ndim = 1"), 3),
])
def test_errors_carry_line_numbers(text, line):
    with pytest.raises(SpecFileError) as info:
        specfile.loads(text)
    assert info.value.line == line
    assert str(info.value).startswith(f"line {line}:")


def test_missing_section():
    with pytest.raises(SpecFileError) as info:
        specfile.loads(GOOD.replace("[objective]\nreward = \"x1\"\n", ""))
    assert "objective" in str(info.value)
