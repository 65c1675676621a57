"""
Tests for the generic type labels and the Case I / Case II classification
"""

from dataclasses import replace

import pytest

from services.corpus import resolve_problem
from services.errors import GlobalSearchInconclusiveError, InfeasiblePointError
from services.expr import Const, Mul
from services.problem_model import load_problem
from services.type_classifier import (
    CASE_I, CASE_II, NOT_CLASSIFIABLE, NOT_SIMPLE, branch_seed_at, compute_alpha,
    check_crcq, check_licq, check_mfcq, classify_point, classify_simplicity,
)


def inline(lower: str, constraints=(), box_y="-2, 2", m: int = 1) -> str:
    lines = ["[problem]", f"m = {m}", f"p = {len(constraints)}", "", "[upper]", 'F = "x + y1"', "",
             "[lower]", f'f = "{lower}"']
    lines += [f'g{j} = "{g}"' for j, g in enumerate(constraints, start=1)]
    lines += ["", "[box]", "x = -1, 1"] + [f"y{k} = {box_y}" for k in range(1, m + 1)]
    return "\n".join(lines) + "\n"


@pytest.mark.parametrize("name, x, y, label", [
    ("quadratic", 0.5, [0.5], "1"),
    ("type2-kink", 0.0, [0.0], "2"),
    ("example-js", 0.0, [0.0, 0.0], "4"),
    ("example-js-m1", 0.0, [0.0], "4"),
    ("type51-corner", 0.0, [0.0], "5-1"),
    ("type52-corner", 0.0, [0.0, 0.0], "5-2"),
    ("principal-agent-binary", 1 / 3, [1 / 3], "1"),
    ("near-duplicate", 0.0, [0.0], "5-2"),
    ("duplicate-constraint", 0.0, [0.0], NOT_CLASSIFIABLE),
])
def test_corpus_labels(name, x, y, label):
    report = classify_point(resolve_problem(f"builtin:{name}"), x, y)
    assert report.label == label
    assert report.reason


def reformulated(P, order, scales):
    """Lower constraints reordered by order and multiplied by positive scales"""
    return replace(P, g_exprs=tuple(Mul(Const(c), P.g_exprs[j]) for c, j in zip(scales, order)))


@pytest.mark.parametrize("name, x, y", [
    ("type2-kink", 0.0, [0.0]),
    ("example-js", 0.0, [0.0, 0.0]),
    ("type51-corner", 0.0, [0.0]),
    ("type52-corner", 0.0, [0.0, 0.0]),
    ("principal-agent-binary", 1 / 3, [1 / 3]),
    ("near-duplicate", 0.0, [0.0]),
    ("duplicate-constraint", 0.0, [0.0]),
])
def test_label_ignores_constraint_order_and_scale(name, x, y):
    P = resolve_problem(f"builtin:{name}")
    label = classify_point(P, x, y).label
    order = list(range(P.p))
    scales = [3.0, 0.5, 2.0][:P.p]
    assert classify_point(reformulated(P, order[::-1], [1.0] * P.p), x, y).label == label
    assert classify_point(reformulated(P, order, scales), x, y).label == label


def test_type3_degenerate_curvature():
    P = load_problem(inline("y1^3 - x*y1"))
    report = classify_point(P, 0.0, [0.0])
    assert report.label == "3"
    assert report.nd.soc.holds is False


def test_non_stationary_point_is_not_classifiable():
    P = resolve_problem("builtin:quadratic")
    report = classify_point(P, 0.0, [1.0])
    assert report.label == NOT_CLASSIFIABLE
    assert "not stationary" in report.reason


def test_two_vanishing_multipliers_record_ties():
    P = load_problem(inline("y1^2 + y2^2", ["-y1", "-y2"], m=2))
    report = classify_point(P, 0.0, [0.0, 0.0])
    assert report.label == NOT_CLASSIFIABLE
    assert report.ties == [0, 1]


def test_rank_tolerance_changes_near_duplicate_label():
    P = resolve_problem("builtin:near-duplicate").with_tolerances(rank=1e-2)
    assert classify_point(P, 0.0, [0.0]).label == NOT_CLASSIFIABLE


def test_infeasible_point_raises():
    P = resolve_problem("builtin:type2-kink")
    with pytest.raises(InfeasiblePointError):
        classify_point(P, 0.5, [0.0])


def test_condition_checks_carry_evidence():
    P = resolve_problem("builtin:type51-corner")
    licq = check_licq(P, 0.0, [0.0])
    assert licq.holds is False
    assert licq.evidence["rank"] == 1

    mfcq = check_mfcq(P, 0.0, [0.0])
    assert mfcq.holds is False
    assert mfcq.evidence["gordan_certificate"] == pytest.approx([0.5, 0.5])

    P = resolve_problem("builtin:type52-corner")
    assert check_mfcq(P, 0.0, [0.0, 0.0]).holds is True
    # Affine constraints keep their rank under perturbation
    assert check_crcq(P, 0.0, [0.0, 0.0]).holds is True


def test_unique_minimizer_is_case_one():
    P = resolve_problem("builtin:example-js")
    report = classify_simplicity(P, 0.0, [0.0, 0.0])
    assert report.case == CASE_I
    assert report.label == "4"
    assert len(report.minimizers) == 1


def test_double_well_is_case_two():
    P = resolve_problem("builtin:double-well")
    report = classify_simplicity(P, 0.0, [-1.0])
    assert report.case == CASE_II
    assert len(report.minimizers) == 2
    assert report.minimizers[0] == pytest.approx([-1.0], abs=1e-6)
    assert report.minimizers[1] == pytest.approx([1.0], abs=1e-6)
    assert report.alpha == pytest.approx(2.0, rel=1e-6)
    assert report.alpha_fd == pytest.approx(2.0, rel=1e-4)
    assert [r.label for r in report.member_reports] == ["1", "1"]


def test_unique_degenerate_minimizer_is_not_simple():
    P = resolve_problem("builtin:duplicate-constraint")
    report = classify_simplicity(P, 0.0, [0.0])
    assert report.case == NOT_SIMPLE


def test_boundary_minimizer_is_inconclusive():
    P = load_problem(inline("-y1", box_y="-1, 1"))
    with pytest.raises(GlobalSearchInconclusiveError):
        classify_simplicity(P, 0.0)


def test_alpha_changes_sign_with_branch_order():
    P = resolve_problem("builtin:double-well")
    left, right = branch_seed_at(P, 0.0, [-1.0]), branch_seed_at(P, 0.0, [1.0])
    # f_x = y1 on both branches, so alpha = 1 - (-1)
    assert compute_alpha(P, 0.0, left, right) == pytest.approx(2.0)
    assert compute_alpha(P, 0.0, right, left) == pytest.approx(-compute_alpha(P, 0.0, left, right), abs=1e-9)
