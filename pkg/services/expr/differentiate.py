"""
Symbolic Differentiation

Exact derivatives of expression trees, one rule per node type.
Results are built with the folding constructors, so derivatives of
polynomials stay small. Derivatives are memoized per (expression, variable).
"""

from functools import lru_cache, singledispatch
from typing import List, Sequence

from services.expr.nodes import (
    Add, BinOp, Call, Const, Div, Expr, Mul, Neg, Pow, Sub, Var,
    add, call, div, mul, neg, power, sub,
)


ZERO = Const(0.0)
ONE = Const(1.0)


@singledispatch
def _derive(e: Expr, var: str) -> Expr:
    raise TypeError(f"No derivative rule for {type(e).__name__}")


@_derive.register
def _(e: Const, var: str) -> Expr:
    return ZERO


@_derive.register
def _(e: Var, var: str) -> Expr:
    return ONE if e.name == var else ZERO


@_derive.register
def _(e: Neg, var: str) -> Expr:
    return neg(differentiate(e.operand, var))


@_derive.register
def _(e: BinOp, var: str) -> Expr:
    a, b = e.left, e.right
    da, db = differentiate(a, var), differentiate(b, var)
    if isinstance(e, Add):
        return add(da, db)
    if isinstance(e, Sub):
        return sub(da, db)
    if isinstance(e, Mul):
        return add(mul(da, b), mul(a, db))
    if isinstance(e, Div):
        return div(sub(mul(da, b), mul(a, db)), power(b, Const(2.0)))
    if isinstance(e, Pow):
        return _derive_pow(a, b, da, db, var)
    raise TypeError(f"No derivative rule for {type(e).__name__}")


def _derive_pow(a: Expr, b: Expr, da: Expr, db: Expr, var: str) -> Expr:
    if var not in b.free_vars():
        # d(a^c) = c * a^(c-1) * da
        exponent_less_one = Const(b.value - 1.0) if isinstance(b, Const) else sub(b, ONE)
        return mul(mul(b, power(a, exponent_less_one)), da)
    # d(a^b) = a^b * (db * log(a) + b * da / a)
    return mul(Pow(a, b), add(mul(db, call("log", a)), div(mul(b, da), a)))


@_derive.register
def _(e: Call, var: str) -> Expr:
    arg = e.arg
    darg = differentiate(arg, var)
    if e.func == "sqrt":
        outer = div(ONE, mul(Const(2.0), call("sqrt", arg)))
    elif e.func == "exp":
        outer = call("exp", arg)
    elif e.func == "log":
        outer = div(ONE, arg)
    elif e.func == "sin":
        outer = call("cos", arg)
    elif e.func == "cos":
        outer = neg(call("sin", arg))
    else:
        raise TypeError(f"No derivative rule for function '{e.func}'")
    return mul(outer, darg)


@lru_cache(maxsize=None)
def differentiate(e: Expr, var: str) -> Expr:
    """
    Exact partial derivative of e with respect to var

    Args:
        e: Expression tree
        var: Variable name (x or y<k>)

    Returns:
        Derivative expression over the same operator set
    """
    if var not in e.free_vars():
        return ZERO
    return _derive(e, var)


def gradient(e: Expr, variables: Sequence[str]) -> List[Expr]:
    return [differentiate(e, v) for v in variables]


def hessian(e: Expr, rows: Sequence[str], cols: Sequence[str]) -> List[List[Expr]]:
    """Matrix of second partials d^2 e / (d rows[i] d cols[j])"""
    return [[differentiate(differentiate(e, r), c) for c in cols] for r in rows]
