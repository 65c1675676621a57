"""
Tests for FJ / KKT multiplier sets and stationarity flags
"""

from dataclasses import replace

import numpy as np
import pytest

from services.corpus import CORPUS, resolve_problem
from services.errors import InfeasiblePointError
from services.expr import Const, Mul
from services.linalg import enumerate_basic_solutions, numerical_rank, strict_direction
from services.multiplier_analysis import (
    EMPTY, KKT_CERTIFIED, RAY, SEGMENT, SINGLETON, UNDETERMINED,
    fj_multipliers, kkt_multipliers, stationarity_status,
)
from services.problem_model import lower_feasible


def test_example_is_fj_but_not_kkt():
    P = resolve_problem("builtin:example-js")
    fj = fj_multipliers(P, 0.0, [0.0, 0.0])
    assert fj.kind == SINGLETON
    assert fj.vertices[0] == pytest.approx([0.0, 1.0])
    assert fj.contains([0.0, 1.0])
    assert not fj.contains([0.5, 0.5])

    kkt = kkt_multipliers(P, 0.0, [0.0, 0.0])
    assert kkt.kind == EMPTY
    assert kkt.is_empty

    flags = stationarity_status(P, 0.0, [0.0, 0.0])
    assert flags.is_gc and flags.is_fj and not flags.is_kkt
    # Nonlinear constraint without MFCQ: B-stationarity is not decided
    assert flags.b_status == UNDETERMINED
    assert flags.is_b is None


def test_duplicate_constraint_has_kkt_segment():
    P = resolve_problem("builtin:duplicate-constraint")
    kkt = kkt_multipliers(P, 0.0, [0.0])
    assert kkt.kind == SEGMENT
    vertices = sorted(v.tolist() for v in kkt.vertices)
    assert vertices[0] == pytest.approx([0.0, 2.0])
    assert vertices[1] == pytest.approx([2.0, 0.0])
    assert kkt.rays == []
    assert kkt.contains([1.0, 1.0])
    assert not kkt.contains([1.0, 0.5])


def test_corner_has_kkt_ray():
    P = resolve_problem("builtin:type51-corner")
    kkt = kkt_multipliers(P, 0.0, [0.0])
    assert kkt.kind == RAY
    assert kkt.vertices[0] == pytest.approx([0.0, 1.0])
    assert kkt.rays[0] == pytest.approx([1.0, 1.0])
    assert kkt.contains([2.0, 3.0])
    assert not kkt.contains([0.0, 3.0])

    flags = stationarity_status(P, 0.0, [0.0])
    assert flags.is_kkt and flags.is_fj and flags.is_gc
    assert flags.b_status == KKT_CERTIFIED
    assert flags.is_b is True


def test_unconstrained_minimizer_and_non_stationary_point():
    P = resolve_problem("builtin:quadratic")
    flags = stationarity_status(P, 0.5, [0.5])
    assert flags.is_kkt and flags.is_fj and flags.is_gc

    flags = stationarity_status(P, 0.0, [1.0])
    assert not (flags.is_gc or flags.is_fj or flags.is_kkt)
    assert fj_multipliers(P, 0.0, [1.0]).is_empty


def test_infeasible_point_gets_all_flags_false():
    P = resolve_problem("builtin:example-js")
    flags = stationarity_status(P, 0.0, [1.0, 0.0])
    assert not flags.feasible
    assert not (flags.is_gc or flags.is_fj or flags.is_kkt)

    with pytest.raises(InfeasiblePointError):
        kkt_multipliers(P, 0.0, [1.0, 0.0])


def test_flags_are_nested():
    P = resolve_problem("builtin:type52-corner")
    for x, y in [(0.0, [0.0, 0.0]), (0.2, [0.2, 0.0]), (-0.3, [0.0, 0.0]), (0.1, [0.3, 0.3])]:
        flags = stationarity_status(P, x, y)
        assert not flags.is_kkt or flags.is_fj
        assert not flags.is_fj or flags.is_gc


def test_basic_solutions_of_simplex():
    E = np.array([[1.0, 1.0, 1.0]])
    vertices = enumerate_basic_solutions(E, np.array([1.0]), 1e-10, 1e-10, 1e-10)
    assert len(vertices) == 3
    assert sorted(tuple(v) for v in vertices) == [(0, 0, 1), (0, 1, 0), (1, 0, 0)]


def test_strict_direction_and_gordan_certificate():
    solvable, d, t_star, certificate = strict_direction(np.array([[1.0, 0.0], [0.0, 1.0]]), 1e-8)
    assert solvable
    assert np.all(np.array([[1.0, 0.0], [0.0, 1.0]]) @ d < 0)

    solvable, _, _, certificate = strict_direction(np.array([[1.0], [-1.0]]), 1e-8)
    assert not solvable
    assert certificate == pytest.approx([0.5, 0.5])


def test_numerical_rank_respects_cutoff():
    A = np.array([[1.0, 1.0], [1.0, 1.0 + 1e-6]])
    assert numerical_rank(A, 1e-8) == 2
    assert numerical_rank(A, 1e-4) == 1


def reformulated(P, order, scales):
    return replace(P, g_exprs=tuple(Mul(Const(c), P.g_exprs[j]) for c, j in zip(scales, order)))


def back_to_original(v, order, scales):
    u = np.zeros(len(order))
    u[list(order)] = np.asarray(scales) * v
    return u


@pytest.mark.parametrize("name, x, y", [
    ("type2-kink", 0.0, [0.0]),
    ("example-js", 0.0, [0.0, 0.0]),
    ("type51-corner", 0.0, [0.0]),
    ("type52-corner", 0.0, [0.0, 0.0]),
    ("duplicate-constraint", 0.0, [0.0]),
])
def test_multipliers_follow_constraint_order_and_scale(name, x, y):
    P = resolve_problem(f"builtin:{name}")
    flags = stationarity_status(P, x, y)
    kkt = kkt_multipliers(P, x, y)
    identity = list(range(P.p))
    for order, scales in [(identity[::-1], [1.0] * P.p), (identity, [3.0, 0.5, 2.0][:P.p])]:
        Q = reformulated(P, order, scales)
        other = stationarity_status(Q, x, y)
        assert (other.is_gc, other.is_fj, other.is_kkt) == (flags.is_gc, flags.is_fj, flags.is_kkt)
        mapped = kkt_multipliers(Q, x, y)
        assert mapped.kind == kkt.kind
        for v in mapped.vertices:
            assert kkt.contains(back_to_original(v, order, scales))
            for r in mapped.rays:
                assert kkt.contains(back_to_original(v + r, order, scales))
        for v in kkt.vertices:
            assert mapped.contains(np.asarray(v)[order] / np.asarray(scales))


def test_scaled_constraint_rescales_kkt_vertices():
    P = resolve_problem("builtin:type52-corner")
    Q = reformulated(P, [0, 1, 2], [1.0, 1.0, 5.0])
    vertices = sorted(v.tolist() for v in kkt_multipliers(Q, 0.0, [0.0, 0.0]).vertices)
    assert vertices[0] == pytest.approx([0.0, 1.0, 0.2])
    assert vertices[1] == pytest.approx([1.0, 2.0, 0.0])


@pytest.mark.parametrize("entry", CORPUS, ids=lambda e: e.name)
def test_flags_are_nested_on_random_feasible_points(entry):
    P = entry.load()
    rng = np.random.default_rng(0)
    lo, hi = np.array(P.box.y_lower), np.array(P.box.y_upper)
    checked = 0
    for _ in range(20000):
        x = rng.uniform(*P.box.x)
        y = rng.uniform(lo, hi)
        if not lower_feasible(P, x, y):
            continue
        flags = stationarity_status(P, x, y)
        assert not flags.is_kkt or flags.is_fj
        assert not flags.is_fj or flags.is_gc
        checked += 1
        if checked == 1000:
            break
    assert checked == 1000
