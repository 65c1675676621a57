"""
Problem Model

Holds one bilevel problem instance

    min_{x,y} F(x, y)  s.t.  G(x, y) <= 0,  y in S(x)
    S(x) = argmin_y { f(x, y) : g(x, y) <= 0 }

with scalar x, its search box and tolerances, and answers basic
feasibility and active-set queries. Also reads and writes the
problem-file format.

Constraint indices are 0-based in the library; reports number them
1-based to match the g1..gp keys of the problem file.
"""

import configparser
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from services.errors import (
    DimensionError, ExprDomainError, ExprSyntaxError,
    InfeasiblePointError, ProblemFormatError,
)
from services.expr import DerivativeOracle, Expr, parse, to_text
from utils.validator import ProblemValidator

logger = logging.getLogger(__name__)


class Tolerances(BaseModel):
    """Numeric thresholds used by every decision in the analysis"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    act: float = Field(default=1e-8, gt=0, description="active-set tolerance")
    rank: float = Field(default=1e-8, gt=0, description="relative singular-value cutoff")
    mult: float = Field(default=1e-8, gt=0, description="multiplier-zero tolerance")
    eig: float = Field(default=1e-8, gt=0, description="eigenvalue-zero tolerance")
    res: float = Field(default=1e-8, gt=0, description="residual tolerance")
    grid: int = Field(default=400, ge=8, description="global-search grid points per axis")
    starts: int = Field(default=16, ge=1, description="multistart count")


@dataclass(frozen=True)
class SearchBox:
    """Per-variable bounds used for the global lower-level search"""
    x: Tuple[float, float]
    y: Tuple[Tuple[float, float], ...]

    @property
    def y_lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.y])

    @property
    def y_upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.y])

    def contains_x(self, x: float) -> bool:
        return self.x[0] <= x <= self.x[1]

    def contains(self, x: float, y: Sequence[float], slack: float = 0.0) -> bool:
        y = np.asarray(y, dtype=float)
        return (self.contains_x(x)
                and bool(np.all(y >= self.y_lower - slack))
                and bool(np.all(y <= self.y_upper + slack)))

    def on_y_boundary(self, y: Sequence[float], tol: float) -> bool:
        y = np.asarray(y, dtype=float)
        width = self.y_upper - self.y_lower
        near = np.minimum(np.abs(y - self.y_lower), np.abs(self.y_upper - y))
        return bool(np.any(near <= tol * np.maximum(width, 1.0)))


@dataclass(frozen=True)
class BilevelProblem:
    """
    Immutable bilevel problem with compiled derivative oracles.

    Oracles use the variable order (x, y1, ..., ym).
    """
    m: int
    F_expr: Expr
    f_expr: Expr
    g_exprs: Tuple[Expr, ...]
    box: SearchBox
    G_exprs: Tuple[Expr, ...] = ()
    tolerances: Tolerances = field(default_factory=Tolerances)
    name: str = ""
    description: str = ""
    n: int = 1

    def __post_init__(self):
        object.__setattr__(self, "g_exprs", tuple(self.g_exprs))
        object.__setattr__(self, "G_exprs", tuple(self.G_exprs))
        object.__setattr__(self, "F", DerivativeOracle(self.F_expr, self.m))
        object.__setattr__(self, "f", DerivativeOracle(self.f_expr, self.m))
        object.__setattr__(self, "g", tuple(DerivativeOracle(e, self.m) for e in self.g_exprs))
        object.__setattr__(self, "G", tuple(DerivativeOracle(e, self.m) for e in self.G_exprs))

    @property
    def p(self) -> int:
        return len(self.g_exprs)

    @property
    def q(self) -> int:
        return len(self.G_exprs)

    @property
    def tol(self) -> Tolerances:
        return self.tolerances

    def with_tolerances(self, **overrides) -> "BilevelProblem":
        merged = {**self.tolerances.model_dump(), **{k: v for k, v in overrides.items() if v is not None}}
        return replace(self, tolerances=Tolerances(**merged))

    def with_upper(self, F_text: str) -> "BilevelProblem":
        return replace(self, F_expr=parse(F_text))

    # Constraint blocks

    def g_values(self, x: float, y) -> np.ndarray:
        return np.array([gj.value(x, y) for gj in self.g])

    def g_grad_y(self, x: float, y, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        """Rows are the y-gradients of the selected constraints, shape (k, m)"""
        indices = range(self.p) if indices is None else indices
        rows = [self.g[j].grad_y(x, y) for j in indices]
        return np.array(rows).reshape(len(rows), self.m)

    def g_grad_x(self, x: float, y, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        indices = range(self.p) if indices is None else indices
        return np.array([self.g[j].grad_x(x, y) for j in indices], dtype=float)

    def lagrangian_hessian(self, x: float, y, u0: float, u: Sequence[float]) -> np.ndarray:
        """Full (m+1)x(m+1) Hessian of u0*f + sum_j u_j*g_j"""
        H = u0 * self.f.hess(x, y) if u0 != 0 else np.zeros((self.m + 1, self.m + 1))
        for j, uj in enumerate(u):
            if uj != 0:
                H = H + uj * self.g[j].hess(x, y)
        return H

    def summary(self) -> Dict:
        return {
            "name": self.name,
            "n": self.n,
            "m": self.m,
            "p": self.p,
            "q": self.q,
            "F": to_text(self.F_expr),
            "f": to_text(self.f_expr),
            "g": [to_text(e) for e in self.g_exprs],
            "G": [to_text(e) for e in self.G_exprs],
        }


def check_point(P: BilevelProblem, y: Sequence[float]) -> np.ndarray:
    is_valid, error = ProblemValidator.validate_point(list(np.atleast_1d(y)), P.m)
    if not is_valid:
        raise DimensionError(error)
    return np.asarray(y, dtype=float).reshape(P.m)


def active_set(P: BilevelProblem, x: float, y: Sequence[float],
               tol: Optional[float] = None) -> Tuple[int, ...]:
    """
    Active index set J0 = { j : |g_j(x, y)| <= tau_act }

    Raises:
        InfeasiblePointError: some g_j(x, y) > tau_act
    """
    y = check_point(P, y)
    tol = P.tol.act if tol is None else tol
    values = P.g_values(x, y)
    violated = [j for j, v in enumerate(values) if v > tol]
    if violated:
        raise InfeasiblePointError(
            f"Point (x={x}, y={y.tolist()}) violates constraints "
            f"{[j + 1 for j in violated]} (max g = {float(values.max()):.3e})",
            violations=violated,
        )
    return tuple(j for j, v in enumerate(values) if abs(v) <= tol)


def lower_feasible(P: BilevelProblem, x: float, y: Sequence[float]) -> bool:
    y = check_point(P, y)
    try:
        return bool(np.all(P.g_values(x, y) <= P.tol.act)) if P.p else True
    except ExprDomainError as e:
        logger.debug(f"Lower feasibility undefined at x={x}: {e}")
        return False


def upper_feasible(P: BilevelProblem, x: float, y: Sequence[float]) -> bool:
    y = check_point(P, y)
    try:
        return all(Gk.value(x, y) <= P.tol.act for Gk in P.G)
    except ExprDomainError as e:
        logger.debug(f"Upper feasibility undefined at x={x}: {e}")
        return False


# Problem-file format

_SECTIONS = ("problem", "upper", "lower", "box", "tolerances")


def _unquote(raw: str, section: str, key: str) -> str:
    text = raw.strip()
    if len(text) < 2 or text[0] != '"' or text[-1] != '"':
        raise ProblemFormatError("Expression must be double-quoted", section, key)
    return text[1:-1]


def _parse_expr(raw: str, section: str, key: str, m: int) -> Expr:
    text = _unquote(raw, section, key)
    try:
        expr = parse(text)
    except ExprSyntaxError as e:
        raise ProblemFormatError(str(e), section, key) from e
    is_valid, error = ProblemValidator.validate_expression_vars(expr, m)
    if not is_valid:
        raise DimensionError(error, section, key)
    return expr


def _parse_int(raw: str, section: str, key: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ProblemFormatError(f"Expected an integer, got '{raw.strip()}'", section, key)


def _parse_bounds(raw: str, key: str) -> Tuple[float, float]:
    parts = [s.strip() for s in raw.split(",")]
    try:
        lo, hi = (float(s) for s in parts)
    except ValueError:
        raise ProblemFormatError(f"Expected 'lo, hi', got '{raw.strip()}'", "box", key)
    is_valid, error = ProblemValidator.validate_bounds(key, lo, hi)
    if not is_valid:
        raise ProblemFormatError(error, "box", key)
    return lo, hi


def _expect_keys(parser: configparser.ConfigParser, section: str, allowed: Sequence[str]):
    for key in parser[section]:
        if key not in allowed:
            raise ProblemFormatError(f"Unknown key '{key}'", section, key)


def load_problem(contents: str, name: str = "") -> BilevelProblem:
    """
    Parse and validate problem-file contents

    Args:
        contents: Text in the problem-file format
        name: Fallback name when [problem] has no name key

    Returns:
        BilevelProblem with default tolerances where unspecified

    Raises:
        ProblemFormatError: malformed file, with section/key context
        DimensionError: expression references an undeclared variable
    """
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(contents)
    except configparser.Error as e:
        raise ProblemFormatError(f"Malformed problem file: {e.message}") from e

    for section in parser.sections():
        if section not in _SECTIONS:
            raise ProblemFormatError(f"Unknown section '{section}'", section)
    for section in ("problem", "upper", "lower", "box"):
        if not parser.has_section(section):
            raise ProblemFormatError("Missing section", section)

    prob = parser["problem"]
    _expect_keys(parser, "problem", ("name", "description", "n", "m", "p", "q"))
    for key in ("m", "p"):
        if key not in prob:
            raise ProblemFormatError("Missing key", "problem", key)
    n = _parse_int(prob.get("n", "1"), "problem", "n")
    m = _parse_int(prob["m"], "problem", "m")
    p = _parse_int(prob["p"], "problem", "p")
    q = _parse_int(prob.get("q", "0"), "problem", "q")
    is_valid, error = ProblemValidator.validate_dimensions(n, m, p, q)
    if not is_valid:
        raise DimensionError(error, "problem")

    upper_keys = ["F"] + [f"G{k}" for k in range(1, q + 1)]
    lower_keys = ["f"] + [f"g{j}" for j in range(1, p + 1)]
    box_keys = ["x"] + [f"y{k}" for k in range(1, m + 1)]
    _expect_keys(parser, "upper", upper_keys)
    _expect_keys(parser, "lower", lower_keys)
    _expect_keys(parser, "box", box_keys)
    for section, keys in (("upper", upper_keys), ("lower", lower_keys), ("box", box_keys)):
        for key in keys:
            if key not in parser[section]:
                raise ProblemFormatError("Missing key", section, key)

    F_expr = _parse_expr(parser["upper"]["F"], "upper", "F", m)
    G_exprs = [_parse_expr(parser["upper"][f"G{k}"], "upper", f"G{k}", m) for k in range(1, q + 1)]
    f_expr = _parse_expr(parser["lower"]["f"], "lower", "f", m)
    g_exprs = [_parse_expr(parser["lower"][f"g{j}"], "lower", f"g{j}", m) for j in range(1, p + 1)]

    box = SearchBox(
        x=_parse_bounds(parser["box"]["x"], "x"),
        y=tuple(_parse_bounds(parser["box"][f"y{k}"], f"y{k}") for k in range(1, m + 1)),
    )

    overrides = {}
    if parser.has_section("tolerances"):
        for key, raw in parser["tolerances"].items():
            if key not in Tolerances.model_fields:
                raise ProblemFormatError(f"Unknown tolerance '{key}'", "tolerances", key)
            overrides[key] = raw.strip()
    try:
        tolerances = Tolerances(**overrides)
    except ValidationError as e:
        first = e.errors()[0]
        key = str(first["loc"][0]) if first.get("loc") else None
        raise ProblemFormatError(first["msg"], "tolerances", key) from e

    problem = BilevelProblem(
        m=m, F_expr=F_expr, f_expr=f_expr, g_exprs=tuple(g_exprs), box=box,
        G_exprs=tuple(G_exprs), tolerances=tolerances,
        name=prob.get("name", name).strip(), description=prob.get("description", "").strip(), n=n,
    )
    logger.debug(f"Loaded problem '{problem.name}' (m={m}, p={p}, q={q})")
    return problem


def load_problem_file(path: str) -> BilevelProblem:
    file_path = Path(path)
    if not file_path.exists():
        raise ProblemFormatError(f"Problem file not found: {path}")
    return load_problem(file_path.read_text(encoding="utf-8"), name=file_path.stem)


def _format_bound(value: float) -> str:
    return repr(float(value))


def serialize(P: BilevelProblem) -> str:
    """Write P in the problem-file format; load_problem reads it back"""
    lines = ["[problem]"]
    if P.name:
        lines.append(f"name = {P.name}")
    if P.description:
        lines.append(f"description = {P.description}")
    lines += [f"n = {P.n}", f"m = {P.m}", f"p = {P.p}", f"q = {P.q}", "", "[upper]"]
    lines.append(f'F = "{to_text(P.F_expr)}"')
    lines += [f'G{k} = "{to_text(e)}"' for k, e in enumerate(P.G_exprs, start=1)]
    lines += ["", "[lower]", f'f = "{to_text(P.f_expr)}"']
    lines += [f'g{j} = "{to_text(e)}"' for j, e in enumerate(P.g_exprs, start=1)]
    lines += ["", "[box]", f"x = {_format_bound(P.box.x[0])}, {_format_bound(P.box.x[1])}"]
    lines += [f"y{k} = {_format_bound(lo)}, {_format_bound(hi)}" for k, (lo, hi) in enumerate(P.box.y, start=1)]
    lines += ["", "[tolerances]"]
    for key, value in P.tolerances.model_dump().items():
        lines.append(f"{key} = {value!r}")
    return "\n".join(lines) + "\n"

