"""
Tests for branch tracing, the lower-level global solve and the solution map
"""

import math

import numpy as np
import pytest

from services.branch_system import implicit_derivatives, newton_correct
from services.continuation import (
    BOX_EXIT, CONSTRAINT_ACTIVATION, EIGENVALUE_ZERO, LICQ_LOSS, MULTIPLIER_ZERO,
    BranchSeed, solution_map, solve_lower_global, trace_branch, value_function,
)
from services.corpus import CORPUS, resolve_problem
from services.errors import PreconditionError
from services.problem_model import load_problem, lower_feasible


def inline(lower: str, constraints=(), x_box: str = "-1, 1") -> str:
    lines = ["[problem]", "m = 1", f"p = {len(constraints)}", "", "[upper]", 'F = "x + y1"', "",
             "[lower]", f'f = "{lower}"']
    lines += [f'g{j} = "{g}"' for j, g in enumerate(constraints, start=1)]
    lines += ["", "[box]", f"x = {x_box}", "y1 = -2, 2"]
    return "\n".join(lines) + "\n"


def test_unconstrained_branch_follows_diagonal():
    P = resolve_problem("builtin:quadratic")
    segment = trace_branch(P, BranchSeed(0.5, np.array([0.5]), np.zeros(0), ()), (-1.0, 2.0), 0.1)
    assert segment.events == []
    assert segment.xs[0] == pytest.approx(-1.0)
    assert segment.xs[-1] == pytest.approx(2.0)
    assert np.all(np.diff(segment.xs) > 0)
    assert segment.ys[:, 0] == pytest.approx(segment.xs, abs=1e-9)
    assert {s.label for s in segment.samples} == {"1"}


def test_multiplier_zero_event_is_located():
    P = resolve_problem("builtin:type2-kink")
    seed = BranchSeed(1.0, np.array([1.0]), np.array([2.0]), (0,))
    segment = trace_branch(P, seed, (-1.0, 1.0), 0.1, direction=-1)
    assert len(segment.events) == 1
    event = segment.events[0]
    assert event.kind == MULTIPLIER_ZERO
    assert event.index == 0
    assert event.x == pytest.approx(0.0, abs=1e-6)
    first = segment.samples[0]
    assert first.event == MULTIPLIER_ZERO
    assert first.label == "2"
    # Samples on the branch keep u = 2x
    for s in segment.samples[1:]:
        assert s.u[0] == pytest.approx(2.0 * s.x, abs=1e-8)


def test_licq_loss_ends_example_branch():
    P = resolve_problem("builtin:example-js")
    # y = (sqrt(x), 0) with u = 1 / (2 sqrt(x)); the Jacobian blows up as x -> 0
    seed = BranchSeed(0.25, np.array([0.5, 0.0]), np.array([1.0]), (0,))
    segment = trace_branch(P, seed, (-1.0, 0.25), 0.01, direction=-1)
    assert [e.kind for e in segment.events] == [LICQ_LOSS]
    assert 1e-5 < segment.events[0].x < 2e-4
    assert segment.samples[0].label == "not-classifiable"


def test_constraint_activation_event():
    P = load_problem(inline("(y1 - x)^2", ["-y1"]))
    segment = trace_branch(P, BranchSeed(0.5, np.array([0.5]), np.zeros(1), ()), (-1.0, 0.5), 0.1,
                           direction=-1)
    assert len(segment.events) == 1
    event = segment.events[0]
    assert event.kind == CONSTRAINT_ACTIVATION
    assert event.index == 0
    assert event.x == pytest.approx(0.0, abs=1e-6)


def test_box_exit_event():
    P = load_problem(inline("(y1 - x)^2", x_box="-1, 3"))
    segment = trace_branch(P, BranchSeed(0.5, np.array([0.5]), np.zeros(0), ()), (0.5, 3.0), 0.25,
                           direction=1)
    assert [e.kind for e in segment.events] == [BOX_EXIT]
    assert segment.events[0].x == pytest.approx(2.0, abs=1e-6)


def test_eigenvalue_zero_event():
    # y = 0 stays critical; its curvature -x changes sign at the pitchfork
    P = load_problem(inline("y1^4/4 - x*y1^2/2"))
    segment = trace_branch(P, BranchSeed(-0.5, np.array([0.0]), np.zeros(0), ()), (-0.5, 0.5), 0.15,
                           direction=1)
    assert [e.kind for e in segment.events] == [EIGENVALUE_ZERO]
    assert segment.events[0].x == pytest.approx(0.0, abs=1e-6)
    assert segment.samples[-1].label == "3"


def test_branch_frame_columns():
    P = resolve_problem("builtin:type2-kink")
    seed = BranchSeed(1.0, np.array([1.0]), np.array([2.0]), (0,))
    frame = trace_branch(P, seed, (0.5, 1.0), 0.1).to_frame(P.m, P.p)
    assert list(frame.columns) == ["x", "y1", "u1", "active_mask", "type_label", "event"]
    assert set(frame["active_mask"]) == {1}


def test_bad_seed_is_rejected():
    P = resolve_problem("builtin:quadratic")
    with pytest.raises(PreconditionError):
        trace_branch(P, BranchSeed(0.5, np.array([0.0]), np.zeros(0), ()), (-1.0, 1.0), 0.1)
    with pytest.raises(PreconditionError):
        trace_branch(P, BranchSeed(0.5, np.array([0.5]), np.zeros(0), ()), (-1.0, 1.0), 0.0)


def test_newton_and_implicit_derivatives_on_kink_branch():
    P = resolve_problem("builtin:type2-kink")
    result = newton_correct(P, 0.4, np.array([0.3]), np.array([0.5]), (0,))
    assert result.converged
    assert result.y == pytest.approx([0.4])
    assert result.u == pytest.approx([0.8])
    Dy, Du = implicit_derivatives(P, 0.4, result.y, result.u, (0,))
    assert Dy == pytest.approx([1.0])
    assert Du == pytest.approx([2.0])


def test_value_function_square_root():
    P = resolve_problem("builtin:example-js-m1")
    for x in (0.04, 0.25, 0.81):
        assert value_function(P, x) == pytest.approx(-math.sqrt(x), abs=1e-7)
    assert value_function(P, -0.5) == math.inf
    assert not solve_lower_global(P, -0.5).feasible


def test_global_solve_of_example():
    P = resolve_problem("builtin:example-js")
    solution = solve_lower_global(P, 0.25)
    assert len(solution.members) == 1
    assert solution.members[0].y == pytest.approx([0.5, 0.0], abs=1e-6)
    assert not solution.inconclusive


def test_solution_map_links_exchanging_minimizers():
    P = resolve_problem("builtin:double-well")
    smap = solution_map(P, np.linspace(-0.2, 0.2, 5), classify=True)
    assert len(smap.entries) == 5
    assert smap.entries[0].solution.members[0].y[0] > 0
    assert smap.entries[-1].solution.members[0].y[0] < 0
    assert len(smap.entries[2].solution.members) == 2
    assert smap.branch_ids() == [0, 1]
    assert all(label == "1" for e in smap.entries for label in e.labels)
    # V is even in x for the tilted double well
    assert smap.values[0] == pytest.approx(smap.values[-1], abs=1e-9)

    frame = smap.to_frame(P.m, P.p)
    assert len(frame) == 6
    assert list(frame.columns) == ["x", "y1", "active_mask", "type_label", "event", "value", "branch"]


@pytest.mark.parametrize("entry", CORPUS, ids=lambda e: e.name)
def test_value_function_bounds_feasible_samples(entry):
    P = entry.load()
    rng = np.random.default_rng(0)
    lo, hi = np.array(P.box.y_lower), np.array(P.box.y_upper)
    checked = 0
    for x in rng.uniform(*P.box.x, size=10):
        V = value_function(P, x)
        for y in rng.uniform(lo, hi, size=(100, P.m)):
            if not lower_feasible(P, x, y):
                continue
            assert P.f.value(x, y) >= V - 1e-7
            checked += 1
    assert checked > 0
