"""
Tests for the direct and implicit optimality checks and MPCC-LICQ
"""

import numpy as np
import pytest

from services.corpus import resolve_problem
from services.errors import CaseNotIdentifiedError, DimensionError, PreconditionError, UpperConstraintsError
from services.expr import to_text
from services.problem_model import load_problem
from services.stationarity_checker import (
    NOT_APPLICABLE, SATISFIED, VIOLATED, StationarityReport,
    check_optimality_direct, check_optimality_implicit, check_unconstrained_corollary,
    cross_validate, mpcc_licq, resubstitute_certificate,
)


def test_mpcc_licq_fj_variant_on_example():
    P = resolve_problem("builtin:example-js")
    report = mpcc_licq(P, 0.0, [0.0, 0.0], [1.0], u0=0.0)
    assert report.variant == "fj"
    assert report.matrix.shape == (5, 5)
    assert report.full_column_rank
    assert report.to_dict()["J"] == [1]


def test_mpcc_licq_fails_for_duplicate_constraint():
    P = resolve_problem("builtin:duplicate-constraint")
    report = mpcc_licq(P, 0.0, [0.0], [1.0, 1.0])
    assert report.variant == "kkt"
    assert not report.full_column_rank
    assert report.rank < report.matrix.shape[1]


def test_mpcc_licq_rejects_bad_multiplier():
    P = resolve_problem("builtin:duplicate-constraint")
    with pytest.raises(DimensionError):
        mpcc_licq(P, 0.0, [0.0], [1.0])
    # stationarity residual 2 - 1 = 1
    with pytest.raises(PreconditionError):
        mpcc_licq(P, 0.0, [0.0], [0.5, 0.5])


@pytest.mark.parametrize("name, x, y, case", [
    ("quadratic", 0.5, [0.5], 1),
    ("type2-kink", 0.0, [0.0], 2),
    ("example-js", 0.0, [0.0, 0.0], 3),
    ("type51-corner", 0.0, [0.0], 4),
    ("type52-corner", 0.0, [0.0, 0.0], 5),
    ("double-well", 0.0, [-1.0], 6),
    ("principal-agent-binary", 1 / 3, [1 / 3], 1),
])
def test_optimal_points_satisfy_both_forms(name, x, y, case):
    result = cross_validate(resolve_problem(f"builtin:{name}"), x, y)
    assert result.direct.case == case
    assert result.direct.verdict == SATISFIED
    assert result.implicit.verdict == SATISFIED
    assert result.agreement


@pytest.mark.parametrize("name, x, y, F", [
    ("example-js", 0.0, [0.0, 0.0], "x - y1"),
    ("type2-kink", 0.0, [0.0], "x + y1"),
    ("type51-corner", 0.0, [0.0], "y1"),
    ("type52-corner", 0.0, [0.0, 0.0], "x + 2*y1"),
    ("double-well", 0.0, [-1.0], "y1"),
])
def test_changed_upper_objective_is_violated(name, x, y, F):
    P = resolve_problem(f"builtin:{name}").with_upper(F)
    result = cross_validate(P, x, y)
    assert result.direct.verdict == VIOLATED
    assert result.implicit.verdict == VIOLATED
    assert result.agreement


def test_non_optimal_point_on_branch_is_violated():
    P = resolve_problem("builtin:quadratic")
    direct = check_optimality_direct(P, 0.0, [0.0])
    implicit = check_optimality_implicit(P, 0.0, [0.0])
    assert direct.verdict == VIOLATED
    assert implicit.verdict == VIOLATED
    # T = 2(x - 1) + 2y along y = x
    assert implicit.details["T"] == pytest.approx(-2.0)


def test_non_simple_point_is_not_applicable():
    P = resolve_problem("builtin:duplicate-constraint")
    with pytest.raises(CaseNotIdentifiedError):
        check_optimality_direct(P, 0.0, [0.0])
    result = cross_validate(P, 0.0, [0.0])
    assert result.direct.verdict == NOT_APPLICABLE
    assert result.implicit.verdict == NOT_APPLICABLE
    assert result.agreement


def test_upper_constraints_are_rejected():
    text = """
[problem]
m = 1
p = 0
q = 1

[upper]
F = "(x - 1)^2 + y1^2"
G1 = "x - 2"

[lower]
f = "(y1 - x)^2"

[box]
x = -1, 2
y1 = -2, 3
"""
    P = load_problem(text)
    with pytest.raises(UpperConstraintsError):
        check_optimality_direct(P, 0.5, [0.5])
    with pytest.raises(UpperConstraintsError):
        check_optimality_implicit(P, 0.5, [0.5])


def test_certificate_resubstitutes():
    for name, x, y in [("example-js", 0.0, [0.0, 0.0]), ("double-well", 0.0, [-1.0])]:
        P = resolve_problem(f"builtin:{name}")
        report = check_optimality_direct(P, x, y)
        assert resubstitute_certificate(P, x, y, report) <= P.tol.res


def test_double_well_certificate_has_positive_mu():
    P = resolve_problem("builtin:double-well")
    report = check_optimality_direct(P, 0.0, [-1.0])
    assert report.certificate["mu"] > 0
    assert sum(report.certificate["lambda"]) == pytest.approx(1.0, abs=1e-6)


def test_unconstrained_corollary():
    P = resolve_problem("builtin:quadratic")
    report = check_unconstrained_corollary(P, 0.5, [0.5])
    assert report.verdict == SATISFIED
    assert report.certificate["w"] == pytest.approx([-0.5])
    assert report.certificate["mu"] == pytest.approx(0.0)
    assert check_unconstrained_corollary(P, 0.0, [0.0]).verdict == VIOLATED

    # w = 1/2 from the y-row, then w - 2 mu = 0
    P = resolve_problem("builtin:double-well")
    report = check_unconstrained_corollary(P, 0.0, [-1.0])
    assert report.verdict == SATISFIED
    assert report.certificate["mu"] == pytest.approx(0.25, abs=1e-6)
    assert report.details["f_critical"] is True

    with pytest.raises(PreconditionError):
        check_unconstrained_corollary(resolve_problem("builtin:type2-kink"), 0.0, [0.0])


@pytest.mark.parametrize("name, x, y, F", [
    ("quadratic", 0.5, [0.5], None),
    ("type2-kink", 0.0, [0.0], None),
    ("example-js", 0.0, [0.0, 0.0], None),
    ("type51-corner", 0.0, [0.0], None),
    ("type52-corner", 0.0, [0.0, 0.0], None),
    ("double-well", 0.0, [-1.0], None),
    ("principal-agent-binary", 1 / 3, [1 / 3], None),
    ("example-js", 0.0, [0.0, 0.0], "x - y1"),
    ("type52-corner", 0.0, [0.0, 0.0], "x + 2*y1"),
    ("double-well", 0.0, [-1.0], "y1"),
])
def test_verdicts_ignore_positive_scaling_of_upper_objective(name, x, y, F):
    P = resolve_problem(f"builtin:{name}")
    if F is not None:
        P = P.with_upper(F)
    scaled = P.with_upper(f"3*({to_text(P.F_expr)})")
    result, other = cross_validate(P, x, y), cross_validate(scaled, x, y)
    assert other.direct.verdict == result.direct.verdict
    assert other.implicit.verdict == result.implicit.verdict
    assert other.agreement == result.agreement


def test_published_certificate_resubstitutes_exactly():
    # Type 4 point: w = (1/2, 1/2), xi = 1 and slack = -df/dy1 . w = 1/2
    P = resolve_problem("builtin:example-js")
    certificate = {"w": np.array([0.5, 0.5]), "xi": np.array([1.0]), "slack": 0.5}
    report = StationarityReport("direct", 3, SATISFIED, certificate=certificate)
    assert resubstitute_certificate(P, 0.0, [0.0, 0.0], report) <= 1e-10
