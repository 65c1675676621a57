"""
Tests for expression parsing, differentiation and evaluation
"""

import math

import numpy as np
import pytest

from services.corpus import CORPUS
from services.errors import ArityError, ExprDomainError, ExprSyntaxError, UnknownIdentifierError
from services.expr import (
    Const, DerivativeOracle, Env, Neg, Pow, differentiate, evaluate, parse, to_text, variable_names,
)


def value(text: str, x: float = 0.0, *y: float) -> float:
    return evaluate(parse(text), Env(x, y))


def test_precedence_and_associativity():
    assert value("1 + 2 * 3") == 7.0
    assert value("2 ^ 3 ^ 2") == 512.0
    assert value("(1 - 2) - 3") == -4.0
    assert value("1 - 2 - 3") == -4.0
    assert value("8 / 4 / 2") == 1.0


def test_unary_minus_binds_looser_than_power():
    tree = parse("-y1^2")
    assert isinstance(tree, Neg)
    assert isinstance(tree.operand, Pow)
    assert value("-y1^2", 0.0, 3.0) == -9.0
    assert value("2^-1") == 0.5


def test_print_parse_fixed_point():
    for text in ["x^2 - 2*x*y1 + 2*y1^2", "-(x - y1)^2", "sqrt(x + 1) / (y1 - y2)",
                 "exp(-y1^2) * cos(x)", "x - (y1 - y2)", "(-x)^2", "2^(3^2)"]:
        printed = to_text(parse(text))
        assert to_text(parse(printed)) == printed
        for x, y in [(0.3, (0.7, -1.1)), (1.2, (0.4, 2.0))]:
            assert value(printed, x, *y) == pytest.approx(value(text, x, *y), rel=1e-14)


def test_syntax_errors_carry_offset():
    with pytest.raises(ExprSyntaxError) as info:
        parse("x + * y1")
    assert info.value.offset == 4

    with pytest.raises(ExprSyntaxError):
        parse("(x + y1")
    with pytest.raises(ExprSyntaxError):
        parse("x $ 2")


def test_unknown_identifier_and_arity():
    with pytest.raises(UnknownIdentifierError):
        parse("tan(x)")
    with pytest.raises(UnknownIdentifierError):
        parse("z + 1")
    with pytest.raises(ArityError):
        parse("sqrt(x, y1)")
    with pytest.raises(ArityError):
        parse("log()")


def test_domain_errors_name_subexpression():
    with pytest.raises(ExprDomainError) as info:
        value("1 + log(x)", 0.0, 1.0)
    assert "log(x)" in info.value.subexpression

    with pytest.raises(ExprDomainError):
        value("sqrt(x - 1)", 0.0, 0.0)
    with pytest.raises(ExprDomainError):
        value("1 / (x - y1)", 1.0, 1.0)
    with pytest.raises(ExprDomainError):
        value("x^0.5", -1.0, 0.0)


def test_derivative_rules():
    d = differentiate(parse("x^2*y1 + sin(y1)"), "y1")
    assert evaluate(d, Env(2.0, (0.0,))) == pytest.approx(4.0 + 1.0)

    d = differentiate(parse("exp(2*x)"), "x")
    assert evaluate(d, Env(0.5, ())) == pytest.approx(2 * math.e)

    d = differentiate(parse("log(x) / y1"), "x")
    assert evaluate(d, Env(2.0, (4.0,))) == pytest.approx(1 / 8)

    # Variables not present differentiate to a folded zero
    assert differentiate(parse("x^3"), "y1") == Const(0.0)


def test_oracle_matches_finite_differences():
    oracle = DerivativeOracle(parse("x*y1^2 - exp(y2)*x^2 + sqrt(1 + y1^2)"), 2)
    x, y = 0.7, np.array([0.3, -0.4])
    grad = oracle.grad(x, y)
    h = 1e-6
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd = (oracle.value(x + e[0], y + e[1:]) - oracle.value(x - e[0], y - e[1:])) / (2 * h)
        assert grad[k] == pytest.approx(fd, abs=1e-7)

    H = oracle.hess(x, y)
    assert np.allclose(H, H.T)
    assert oracle.hess_xy(x, y) == pytest.approx(H[0, 1:])
    assert oracle.grad_x(x, y) == pytest.approx(grad[0])


def test_oracle_affine_flag():
    assert DerivativeOracle(parse("y1 + 2*y2 - x^2"), 2).affine_in_y
    assert not DerivativeOracle(parse("y1*y2"), 2).affine_in_y


def test_vectorized_values_mark_domain_failures():
    oracle = DerivativeOracle(parse("sqrt(y1) + x"), 1)
    Y = np.array([[4.0], [-1.0], [0.0]])
    out = oracle.values(1.0, Y)
    assert out[0] == pytest.approx(3.0)
    assert math.isnan(out[1])
    assert out[2] == pytest.approx(1.0)

    with pytest.raises(ExprDomainError):
        oracle.value(1.0, [-1.0])


def corpus_oracles(P):
    return [P.F, P.f, *P.g]


def random_points(P, count: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    xs = rng.uniform(*P.box.x, size=count)
    ys = rng.uniform(P.box.y_lower, P.box.y_upper, size=(count, P.m))
    return zip(xs, ys)


@pytest.mark.parametrize("entry", CORPUS, ids=lambda e: e.name)
def test_corpus_derivatives_match_finite_differences(entry):
    P = entry.load()
    h = 1e-5
    for oracle in corpus_oracles(P):
        for x, y in random_points(P, 100):
            try:
                grad, H = oracle.grad(x, y), oracle.hess(x, y)
            except ExprDomainError:
                continue
            z = np.r_[x, y]
            for k in range(P.m + 1):
                e = np.zeros(P.m + 1)
                e[k] = h
                plus, minus = z + e, z - e
                fd = (oracle.value(plus[0], plus[1:]) - oracle.value(minus[0], minus[1:])) / (2 * h)
                assert abs(grad[k] - fd) <= 1e-6 * max(1.0, abs(grad[k]))
                fd_row = (oracle.grad(plus[0], plus[1:]) - oracle.grad(minus[0], minus[1:])) / (2 * h)
                assert np.all(np.abs(H[k] - fd_row) <= 1e-4 * np.maximum(1.0, np.abs(H[k])))


@pytest.mark.parametrize("entry", CORPUS, ids=lambda e: e.name)
def test_mixed_partials_commute(entry):
    P = entry.load()
    names = variable_names(P.m)
    pairs = [(a, b) for i, a in enumerate(names) for b in names[i + 1:]]
    for oracle in corpus_oracles(P):
        for a, b in pairs:
            ab = differentiate(differentiate(oracle.expr, a), b)
            ba = differentiate(differentiate(oracle.expr, b), a)
            for x, y in random_points(P, 100, seed=1):
                env = Env(x, tuple(y))
                left, right = evaluate(ab, env), evaluate(ba, env)
                assert abs(left - right) <= 1e-9 * max(1.0, abs(left))
