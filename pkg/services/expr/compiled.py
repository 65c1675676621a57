"""
Expression Evaluation

Two evaluators for the same trees:
- evaluate(): strict scalar tree walk, raises ExprDomainError naming the
  offending subexpression
- compile_expr(): numpy closure for vectorized grids; domain failures
  come out as nan/inf and are treated as invalid points by callers

DerivativeOracle bundles value, gradient and Hessian of one expression
in the variable order (x, y1, ..., ym).
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from services.errors import ExprDomainError
from services.expr.differentiate import differentiate
from services.expr.nodes import (
    Add, Call, Const, Div, Expr, Mul, Neg, Pow, Sub, Var, to_text,
)


@dataclass(frozen=True)
class Env:
    """Variable bindings: scalar x and the lower-level vector y"""
    x: float
    y: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "y", tuple(float(v) for v in self.y))

    def lookup(self, name: str) -> float:
        if name == "x":
            return float(self.x)
        index = int(name[1:]) - 1
        if index >= len(self.y):
            raise KeyError(f"Variable '{name}' not bound (m = {len(self.y)})")
        return self.y[index]


def variable_names(m: int) -> List[str]:
    return ["x"] + [f"y{k}" for k in range(1, m + 1)]


def _checked(value: float, node: Expr) -> float:
    if not math.isfinite(value):
        raise ExprDomainError("Non-finite result", to_text(node))
    return value


def evaluate(e: Expr, env: Env) -> float:
    """
    Strict IEEE double evaluation

    Raises:
        ExprDomainError: log of nonpositive, division by zero, sqrt of
            negative, real exponent of nonpositive base, overflow
    """
    if isinstance(e, Const):
        return float(e.value)
    if isinstance(e, Var):
        return env.lookup(e.name)
    if isinstance(e, Neg):
        return -evaluate(e.operand, env)
    if isinstance(e, Call):
        a = evaluate(e.arg, env)
        if e.func == "sqrt":
            if a < 0:
                raise ExprDomainError("Square root of negative value", to_text(e))
            return math.sqrt(a)
        if e.func == "log":
            if a <= 0:
                raise ExprDomainError("Logarithm of nonpositive value", to_text(e))
            return math.log(a)
        if e.func == "exp":
            try:
                return _checked(math.exp(a), e)
            except OverflowError:
                raise ExprDomainError("Overflow", to_text(e))
        if e.func == "sin":
            return math.sin(a)
        return math.cos(a)
    a = evaluate(e.left, env)
    b = evaluate(e.right, env)
    if isinstance(e, Add):
        return _checked(a + b, e)
    if isinstance(e, Sub):
        return _checked(a - b, e)
    if isinstance(e, Mul):
        return _checked(a * b, e)
    if isinstance(e, Div):
        if b == 0:
            raise ExprDomainError("Division by zero", to_text(e))
        return _checked(a / b, e)
    if isinstance(e, Pow):
        if not float(b).is_integer():
            if a <= 0:
                raise ExprDomainError("Real exponent of nonpositive base", to_text(e))
        elif a == 0 and b < 0:
            raise ExprDomainError("Division by zero", to_text(e))
        try:
            return _checked(float(a) ** float(b), e)
        except OverflowError:
            raise ExprDomainError("Overflow", to_text(e))
    raise TypeError(f"Unknown expression node: {type(e).__name__}")


Closure = Callable[[np.ndarray, Sequence[np.ndarray]], np.ndarray]

_NUMPY_FUNCTIONS = {
    "sqrt": np.sqrt,
    "exp": np.exp,
    "log": lambda a: np.log(np.where(a > 0, a, np.nan)),
    "sin": np.sin,
    "cos": np.cos,
}


def _numpy_pow(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    integral = np.equal(np.floor(b), b)
    ok = integral | (a > 0)
    return np.where(ok, np.power(a, b), np.nan)


def compile_expr(e: Expr) -> Closure:
    """Build a numpy closure f(x, ys) with ys[k] holding y_{k+1}"""
    if isinstance(e, Const):
        value = float(e.value)
        return lambda x, ys: value
    if isinstance(e, Var):
        if e.name == "x":
            return lambda x, ys: x
        index = int(e.name[1:]) - 1
        return lambda x, ys: ys[index]
    if isinstance(e, Neg):
        inner = compile_expr(e.operand)
        return lambda x, ys: -inner(x, ys)
    if isinstance(e, Call):
        inner = compile_expr(e.arg)
        fn = _NUMPY_FUNCTIONS[e.func]
        return lambda x, ys: fn(inner(x, ys))
    left = compile_expr(e.left)
    right = compile_expr(e.right)
    if isinstance(e, Add):
        return lambda x, ys: left(x, ys) + right(x, ys)
    if isinstance(e, Sub):
        return lambda x, ys: left(x, ys) - right(x, ys)
    if isinstance(e, Mul):
        return lambda x, ys: left(x, ys) * right(x, ys)
    if isinstance(e, Div):
        return lambda x, ys: np.true_divide(left(x, ys), right(x, ys))
    if isinstance(e, Pow):
        if isinstance(e.right, Const) and float(e.right.value).is_integer():
            exponent = int(e.right.value)
            return lambda x, ys: np.power(np.asarray(left(x, ys), dtype=float), exponent)
        return lambda x, ys: _numpy_pow(left(x, ys), right(x, ys))
    raise TypeError(f"Unknown expression node: {type(e).__name__}")


class DerivativeOracle:
    """
    Value, gradient and Hessian of one expression.

    Index 0 is x, index k is y_k. Hessian entries are symmetric, so only
    the upper triangle is differentiated.
    """

    def __init__(self, expr: Expr, m: int):
        self.expr = expr
        self.m = m
        names = variable_names(m)
        self.grad_exprs = [differentiate(expr, v) for v in names]
        size = m + 1
        self.hess_exprs = [[None] * size for _ in range(size)]
        for i in range(size):
            for j in range(i, size):
                entry = differentiate(self.grad_exprs[i], names[j])
                self.hess_exprs[i][j] = entry
                self.hess_exprs[j][i] = entry
        self._value = compile_expr(expr)
        self._grad = [compile_expr(g) for g in self.grad_exprs]
        self._hess = [[compile_expr(h) for h in row] for row in self.hess_exprs]
        self.affine_in_y = all(
            isinstance(self.hess_exprs[i][j], Const) and self.hess_exprs[i][j].value == 0
            for i in range(1, size) for j in range(1, size)
        )

    @staticmethod
    def _split(y) -> List[float]:
        return [float(v) for v in np.asarray(y, dtype=float).reshape(-1)]

    def _scalar(self, closure: Closure, node: Expr, x: float, y) -> float:
        ys = self._split(y)
        with np.errstate(all="ignore"):
            value = float(closure(float(x), ys))
        if not math.isfinite(value):
            # Strict walk names the failing subexpression
            evaluate(node, Env(x, tuple(ys)))
            raise ExprDomainError("Non-finite result", to_text(node))
        return value

    def value(self, x: float, y) -> float:
        return self._scalar(self._value, self.expr, x, y)

    def grad(self, x: float, y) -> np.ndarray:
        return np.array([
            self._scalar(c, node, x, y) for c, node in zip(self._grad, self.grad_exprs)
        ])

    def grad_x(self, x: float, y) -> float:
        return self._scalar(self._grad[0], self.grad_exprs[0], x, y)

    def grad_y(self, x: float, y) -> np.ndarray:
        return self.grad(x, y)[1:]

    def hess(self, x: float, y) -> np.ndarray:
        size = self.m + 1
        out = np.empty((size, size))
        for i in range(size):
            for j in range(i, size):
                out[i, j] = out[j, i] = self._scalar(self._hess[i][j], self.hess_exprs[i][j], x, y)
        return out

    def hess_xy(self, x: float, y) -> np.ndarray:
        """Mixed partials d^2 / (dx dy_k), length m"""
        return self.hess(x, y)[0, 1:]

    def values(self, x, Y: np.ndarray) -> np.ndarray:
        """
        Vectorized values over many points

        Args:
            x: scalar or array broadcastable against the rows of Y
            Y: array of shape (N, m)

        Returns:
            Array of shape (N,), nan where the expression is undefined
        """
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        ys = [Y[:, k] for k in range(self.m)]
        with np.errstate(all="ignore"):
            out = self._value(np.asarray(x, dtype=float), ys)
        out = np.broadcast_to(np.asarray(out, dtype=float), (Y.shape[0],)).copy()
        out[~np.isfinite(out)] = np.nan
        return out
