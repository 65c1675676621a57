"""
Expression Parser

Recursive-descent parser for the problem-file expression grammar:

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := '-' unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | VARIABLE | FUNCTION '(' expr ')' | '(' expr ')'

Variables are x and y1, y2, ...; functions are sqrt, exp, log, sin, cos.
'^' is right-associative and binds tighter than unary minus on its left,
so -y1^2 is -(y1^2).
"""

import re
from typing import List, NamedTuple

from services.errors import ArityError, ExprSyntaxError, UnknownIdentifierError
from services.expr.nodes import (
    FUNCTIONS, Add, Call, Const, Div, Expr, Mul, Neg, Pow, Sub, Var,
)


VARIABLE_PATTERN = re.compile(r"x|y[1-9][0-9]*")

_TOKEN = re.compile(
    r"(?P<ws>\s+)"
    r"|(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^(),])"
)


class Token(NamedTuple):
    kind: str
    text: str
    offset: int


def tokenize(text: str) -> List[Token]:
    tokens = []
    pos = 0
    while pos < len(text):
        match = _TOKEN.match(text, pos)
        if match is None:
            raise ExprSyntaxError(f"Unexpected character '{text[pos]}'", pos, text)
        kind = match.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, match.group(), pos))
        pos = match.end()
    tokens.append(Token("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.index = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.index]

    def advance(self) -> Token:
        token = self.tokens[self.index]
        self.index += 1
        return token

    def fail(self, message: str, token: Token = None):
        token = token or self.current
        found = "end of input" if token.kind == "end" else f"'{token.text}'"
        raise ExprSyntaxError(f"{message}, found {found}", token.offset, self.text)

    def expect(self, symbol: str):
        if self.current.kind != "op" or self.current.text != symbol:
            self.fail(f"Expected '{symbol}'")
        self.advance()

    def parse(self) -> Expr:
        node = self.expr()
        if self.current.kind != "end":
            self.fail("Unexpected token")
        return node

    def expr(self) -> Expr:
        node = self.term()
        while self.current.kind == "op" and self.current.text in "+-":
            op = self.advance().text
            right = self.term()
            node = Add(node, right) if op == "+" else Sub(node, right)
        return node

    def term(self) -> Expr:
        node = self.unary()
        while self.current.kind == "op" and self.current.text in "*/":
            op = self.advance().text
            right = self.unary()
            node = Mul(node, right) if op == "*" else Div(node, right)
        return node

    def unary(self) -> Expr:
        if self.current.kind == "op" and self.current.text == "-":
            self.advance()
            operand = self.unary()
            if isinstance(operand, Const) and operand.value > 0:
                return Const(-operand.value)
            return Neg(operand)
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        if self.current.kind == "op" and self.current.text == "^":
            self.advance()
            return Pow(base, self.unary())
        return base

    def atom(self) -> Expr:
        token = self.current
        if token.kind == "number":
            self.advance()
            return Const(float(token.text))
        if token.kind == "ident":
            return self.identifier()
        if token.kind == "op" and token.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        self.fail("Expected a number, variable, function call or '('")

    def identifier(self) -> Expr:
        token = self.advance()
        name = token.text
        if name in FUNCTIONS:
            if self.current.kind != "op" or self.current.text != "(":
                self.fail(f"Function '{name}' must be followed by '('")
            self.advance()
            if self.current.kind == "op" and self.current.text == ")":
                raise ArityError(f"Function '{name}' takes 1 argument, got 0", self.current.offset, self.text)
            arg = self.expr()
            if self.current.kind == "op" and self.current.text == ",":
                raise ArityError(f"Function '{name}' takes 1 argument, got more", self.current.offset, self.text)
            self.expect(")")
            return Call(name, arg)
        if VARIABLE_PATTERN.fullmatch(name):
            if self.current.kind == "op" and self.current.text == "(":
                self.fail(f"Variable '{name}' cannot be called")
            return Var(name)
        raise UnknownIdentifierError(f"Unknown identifier '{name}'", token.offset, self.text)


def parse(text: str) -> Expr:
    """
    Parse infix text into an expression tree

    Args:
        text: Expression over x, y1..ym

    Returns:
        Expression tree (no simplification applied)

    Raises:
        ExprSyntaxError: malformed text, with the offset of the failure
    """
    return _Parser(text).parse()
