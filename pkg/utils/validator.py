"""
Problem Validation Utilities

Validates problem data before it is turned into a BilevelProblem:
- Dimensions (n = 1, m >= 1, p >= 0, q >= 0)
- Expressions only reference declared variables
- Search box bounds are ordered and finite
- Points have the declared lower-level dimension
"""

import math
import re
from typing import Optional, Sequence, Tuple

from services.expr.nodes import Expr


_Y_NAME = re.compile(r"y([1-9][0-9]*)")


class ProblemValidator:
    """Validates problem dimensions, expressions, boxes and points"""

    MAX_LOWER_DIM = 8
    MAX_CONSTRAINTS = 8

    @staticmethod
    def validate_dimensions(n: int, m: int, p: int, q: int) -> Tuple[bool, Optional[str]]:
        """
        Validate declared dimensions

        Args:
            n: Upper-level dimension
            m: Lower-level dimension
            p: Number of lower-level constraints
            q: Number of upper-level constraints

        Returns:
            Tuple of (is_valid, error_message)
        """
        if n != 1:
            return False, f"Upper-level dimension must be 1 (got n = {n})"
        if not 1 <= m <= ProblemValidator.MAX_LOWER_DIM:
            return False, f"Lower-level dimension m = {m} outside 1..{ProblemValidator.MAX_LOWER_DIM}"
        if not 0 <= p <= ProblemValidator.MAX_CONSTRAINTS:
            return False, f"Constraint count p = {p} outside 0..{ProblemValidator.MAX_CONSTRAINTS}"
        if q < 0:
            return False, f"Upper constraint count q = {q} is negative"
        return True, None

    @staticmethod
    def validate_expression_vars(expr: Expr, m: int) -> Tuple[bool, Optional[str]]:
        """
        Check that every variable leaf is x or y1..ym

        Returns:
            Tuple of (is_valid, error_message)
        """
        for name in sorted(expr.free_vars()):
            if name == "x":
                continue
            match = _Y_NAME.fullmatch(name)
            if match is None or int(match.group(1)) > m:
                return False, f"Variable '{name}' not declared (m = {m})"
        return True, None

    @staticmethod
    def validate_bounds(name: str, lo: float, hi: float) -> Tuple[bool, Optional[str]]:
        if not (math.isfinite(lo) and math.isfinite(hi)):
            return False, f"Bounds for '{name}' must be finite"
        if lo >= hi:
            return False, f"Bounds for '{name}' must satisfy lo < hi (got {lo}, {hi})"
        return True, None

    @staticmethod
    def validate_point(y: Sequence[float], m: int) -> Tuple[bool, Optional[str]]:
        if len(y) != m:
            return False, f"Point has {len(y)} lower-level components, expected m = {m}"
        if not all(math.isfinite(float(v)) for v in y):
            return False, "Point has non-finite components"
        return True, None

