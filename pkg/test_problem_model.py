"""
Tests for problem loading, validation and feasibility queries
"""

import numpy as np
import pytest

from services.corpus import CORPUS, resolve_problem
from services.errors import DimensionError, InfeasiblePointError, ProblemFormatError
from services.expr import to_text
from services.problem_model import (
    Tolerances, active_set, load_problem, load_problem_file, lower_feasible, serialize, upper_feasible,
)
from utils.validator import ProblemValidator


QUADRATIC = """
# leading comment
[problem]
name = quad
m = 1
p = 1

[upper]
F = "(x - 1)^2 + (y1 - 1)^2"

[lower]
f = "(y1 - x)^2"
g1 = "-y1"

[box]
x = -1, 2
y1 = -2, 3
"""


def test_load_defaults():
    P = load_problem(QUADRATIC)
    assert P.name == "quad"
    assert (P.n, P.m, P.p, P.q) == (1, 1, 1, 0)
    assert P.box.x == (-1.0, 2.0)
    assert P.tol == Tolerances()
    assert P.tol.grid == 400


def test_tolerance_section_and_overrides():
    P = load_problem(QUADRATIC + "\n[tolerances]\nact = 1e-6\ngrid = 50\n")
    assert P.tol.act == 1e-6
    assert P.tol.grid == 50
    Q = P.with_tolerances(rank=1e-4, act=None)
    assert Q.tol.rank == 1e-4
    assert Q.tol.act == 1e-6
    assert P.tol.rank == 1e-8


def test_serialize_round_trip():
    P = resolve_problem("builtin:example-js")
    Q = load_problem(serialize(P))
    assert serialize(Q) == serialize(P)
    assert to_text(Q.F_expr) == to_text(P.F_expr)
    assert Q.box == P.box


@pytest.mark.parametrize("entry", CORPUS, ids=lambda e: e.name)
def test_serialized_problem_has_same_values(entry):
    P = entry.load()
    Q = load_problem(serialize(P))
    assert (Q.m, Q.p, Q.q) == (P.m, P.p, P.q)
    assert Q.box == P.box
    assert Q.tol == P.tol
    rng = np.random.default_rng(0)
    for x in rng.uniform(*P.box.x, size=100):
        y = rng.uniform(P.box.y_lower, P.box.y_upper)
        assert Q.F.value(x, y) == pytest.approx(P.F.value(x, y), rel=1e-12, abs=1e-12)
        assert Q.f.value(x, y) == pytest.approx(P.f.value(x, y), rel=1e-12, abs=1e-12)
        assert Q.g_values(x, y) == pytest.approx(P.g_values(x, y), rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("contents, section, key", [
    (QUADRATIC.replace('F = "(x - 1)^2 + (y1 - 1)^2"', 'F = (x - 1)^2'), "upper", "F"),
    (QUADRATIC.replace('g1 = "-y1"', 'g1 = "-y1 +"'), "lower", "g1"),
    (QUADRATIC.replace("y1 = -2, 3", "y1 = 3, -2"), "box", "y1"),
    (QUADRATIC.replace("p = 1", "p = one"), "problem", "p"),
    (QUADRATIC + "\n[tolerances]\nact = -1\n", "tolerances", "act"),
    (QUADRATIC + "\n[tolerances]\nspeed = 2\n", "tolerances", "speed"),
])
def test_format_errors_name_location(contents, section, key):
    with pytest.raises(ProblemFormatError) as info:
        load_problem(contents)
    assert info.value.section == section
    assert info.value.key == key


def test_missing_section_and_unknown_section():
    with pytest.raises(ProblemFormatError) as info:
        load_problem(QUADRATIC.replace("[box]\nx = -1, 2\ny1 = -2, 3\n", ""))
    assert info.value.section == "box"
    with pytest.raises(ProblemFormatError):
        load_problem(QUADRATIC + "\n[extras]\nz = 1\n")


def test_undeclared_variable_is_dimension_error():
    with pytest.raises(DimensionError) as info:
        load_problem(QUADRATIC.replace('f = "(y1 - x)^2"', 'f = "(y2 - x)^2"'))
    assert info.value.key == "f"

    with pytest.raises(DimensionError):
        load_problem(QUADRATIC.replace("m = 1", "m = 0"))


def test_missing_file():
    with pytest.raises(ProblemFormatError):
        load_problem_file("/nonexistent/problem.blp")


def test_active_set_and_feasibility():
    P = load_problem(QUADRATIC)
    assert active_set(P, 0.5, [0.0]) == (0,)
    assert active_set(P, 0.5, [0.4]) == ()
    assert lower_feasible(P, 0.0, [1.0])
    assert not lower_feasible(P, 0.0, [-0.1])
    assert upper_feasible(P, 0.0, [-0.1])

    with pytest.raises(InfeasiblePointError) as info:
        active_set(P, 0.0, [-0.1])
    assert info.value.violations == [0]

    with pytest.raises(DimensionError):
        active_set(P, 0.0, [0.0, 1.0])


def test_active_set_honors_tolerance():
    P = load_problem(QUADRATIC)
    assert active_set(P, 0.0, [-5e-9]) == (0,)
    assert active_set(P.with_tolerances(act=1e-12), 0.0, [5e-9]) == ()


def test_validator_messages():
    assert ProblemValidator.validate_dimensions(1, 2, 1, 0) == (True, None)
    ok, error = ProblemValidator.validate_dimensions(2, 1, 0, 0)
    assert not ok and "n = 2" in error
    ok, error = ProblemValidator.validate_bounds("x", 1.0, 1.0)
    assert not ok
    ok, error = ProblemValidator.validate_point([np.nan], 1)
    assert not ok
