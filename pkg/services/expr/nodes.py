"""
Expression Nodes

Immutable expression tree for problem data (F, f, g_j, G_k) over the
variables x, y1..ym, plus the canonical printer and the folding
constructors used by differentiation.
"""

import math
from dataclasses import dataclass
from typing import ClassVar, FrozenSet, Tuple


# Binding strength, loosest first
PREC_ADD = 1
PREC_MUL = 2
PREC_NEG = 3
PREC_POW = 4
PREC_ATOM = 5

FUNCTIONS = ("sqrt", "exp", "log", "sin", "cos")


class Expr:
    """Base class for expression nodes"""

    precedence: ClassVar[int] = PREC_ATOM

    def children(self) -> Tuple["Expr", ...]:
        return ()

    def free_vars(self) -> FrozenSet[str]:
        names = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if isinstance(node, Var):
                names.add(node.name)
            stack.extend(node.children())
        return frozenset(names)

    def binding(self) -> int:
        return self.precedence

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True)
class Const(Expr):
    value: float

    def binding(self) -> int:
        return PREC_NEG if self.value < 0 else PREC_ATOM


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    operand: Expr

    precedence: ClassVar[int] = PREC_NEG

    def children(self) -> Tuple[Expr, ...]:
        return (self.operand,)


@dataclass(frozen=True)
class BinOp(Expr):
    left: Expr
    right: Expr

    op: ClassVar[str] = "?"

    def children(self) -> Tuple[Expr, ...]:
        return (self.left, self.right)


class Add(BinOp):
    op = "+"
    precedence = PREC_ADD


class Sub(BinOp):
    op = "-"
    precedence = PREC_ADD


class Mul(BinOp):
    op = "*"
    precedence = PREC_MUL


class Div(BinOp):
    op = "/"
    precedence = PREC_MUL


class Pow(BinOp):
    op = "^"
    precedence = PREC_POW


@dataclass(frozen=True)
class Call(Expr):
    func: str
    arg: Expr

    def children(self) -> Tuple[Expr, ...]:
        return (self.arg,)


def format_number(value: float) -> str:
    """Shortest text that parses back to the same double"""
    magnitude = abs(value)
    if float(magnitude).is_integer() and magnitude < 1e16:
        return str(int(magnitude))
    return repr(float(magnitude))


def _wrap(node: Expr, parenthesize: bool) -> str:
    text = to_text(node)
    return f"({text})" if parenthesize else text


def to_text(e: Expr) -> str:
    """
    Canonical infix form.

    Printing then parsing gives a tree that prints identically.
    """
    if isinstance(e, Const):
        body = format_number(e.value)
        return f"-{body}" if e.value < 0 else body
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Neg):
        return "-" + _wrap(e.operand, e.operand.binding() < PREC_NEG)
    if isinstance(e, Call):
        return f"{e.func}({to_text(e.arg)})"
    if isinstance(e, Pow):
        base = _wrap(e.left, e.left.binding() <= PREC_POW)
        exponent = _wrap(e.right, e.right.binding() < PREC_NEG)
        return f"{base}^{exponent}"
    if isinstance(e, BinOp):
        left = _wrap(e.left, e.left.binding() < e.precedence)
        right = _wrap(e.right, e.right.binding() <= e.precedence)
        return f"{left} {e.op} {right}"
    raise TypeError(f"Unknown expression node: {type(e).__name__}")


# Folding constructors

def _is_const(e: Expr, value: float = None) -> bool:
    if not isinstance(e, Const):
        return False
    return value is None or e.value == value


def _finite_const(value: float):
    return Const(float(value)) if math.isfinite(value) else None


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value) if a.value != 0 else Const(0.0)
    if isinstance(a, Neg):
        return a.operand
    return Neg(a)


def add(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0):
        return b
    if _is_const(b, 0):
        return a
    return Add(a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0):
        return a
    if _is_const(a, 0):
        return neg(b)
    return Sub(a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0) or _is_const(b, 0):
        return Const(0.0)
    if _is_const(a, 1):
        return b
    if _is_const(b, 1):
        return a
    if _is_const(a, -1):
        return neg(b)
    if _is_const(b, -1):
        return neg(a)
    return Mul(a, b)


def div(a: Expr, b: Expr) -> Expr:
    if _is_const(a) and _is_const(b) and b.value != 0:
        return Const(a.value / b.value)
    if _is_const(b, 1):
        return a
    if _is_const(a, 0) and not _is_const(b, 0):
        return Const(0.0)
    return Div(a, b)


def power(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0):
        return Const(1.0)
    if _is_const(b, 1):
        return a
    if _is_const(a) and _is_const(b):
        base, exponent = a.value, b.value
        if base > 0 or (float(exponent).is_integer() and (base != 0 or exponent > 0)):
            try:
                folded = _finite_const(base ** exponent)
            except OverflowError:
                folded = None
            if folded is not None:
                return folded
    return Pow(a, b)


_FOLDERS = {
    "sqrt": (lambda v: v >= 0, math.sqrt),
    "exp": (lambda v: v < 700, math.exp),
    "log": (lambda v: v > 0, math.log),
    "sin": (lambda v: True, math.sin),
    "cos": (lambda v: True, math.cos),
}


def call(func: str, arg: Expr) -> Expr:
    if isinstance(arg, Const):
        in_domain, fn = _FOLDERS[func]
        if in_domain(arg.value):
            return Const(fn(arg.value))
    return Call(func, arg)
