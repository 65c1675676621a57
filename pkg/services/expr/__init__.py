"""
Expression Core

Parse closed-form problem expressions, differentiate them exactly, and
evaluate them pointwise or over numpy grids.
"""

from services.expr.nodes import Expr, Const, Var, Neg, Add, Sub, Mul, Div, Pow, Call, to_text
from services.expr.parser import parse
from services.expr.differentiate import differentiate, gradient, hessian
from services.expr.compiled import Env, evaluate, compile_expr, DerivativeOracle, variable_names

__all__ = [
    'Expr',
    'Const',
    'Var',
    'Neg',
    'Add',
    'Sub',
    'Mul',
    'Div',
    'Pow',
    'Call',
    'to_text',
    'parse',
    'differentiate',
    'gradient',
    'hessian',
    'Env',
    'evaluate',
    'compile_expr',
    'DerivativeOracle',
    'variable_names',
]
