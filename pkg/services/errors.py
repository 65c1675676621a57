"""
Error Types

Exception hierarchy shared by the analysis services and the CLI.

The CLI maps families to exit codes:
- input and usage problems (ProblemFormatError, ExprSyntaxError, PreconditionError) -> 2
- numerical breakdowns (NumericalError) -> 3
- sampled or searched answers that cannot be trusted (InconclusiveError) -> 1
"""

from typing import Any, List, Optional


class BilevelError(Exception):
    """Base class for all errors raised by the analysis services"""


class ExprSyntaxError(BilevelError, ValueError):
    """Malformed expression text; carries the byte offset of the failure"""

    def __init__(self, message: str, offset: int, text: str = ""):
        self.offset = offset
        self.text = text
        super().__init__(f"{message} at offset {offset}")


class UnknownIdentifierError(ExprSyntaxError):
    """Identifier that is neither a declared variable nor a known function"""


class ArityError(ExprSyntaxError):
    """Function called with the wrong number of arguments"""


class ExprDomainError(BilevelError, ArithmeticError):
    """Evaluation left the real domain (log of nonpositive, division by zero, ...)"""

    def __init__(self, message: str, subexpression: str):
        self.subexpression = subexpression
        super().__init__(f"{message} in '{subexpression}'")


class ProblemFormatError(BilevelError, ValueError):
    """Problem file that cannot be loaded; section/key give the location"""

    def __init__(self, message: str, section: Optional[str] = None, key: Optional[str] = None):
        self.section = section
        self.key = key
        where = ""
        if section and key:
            where = f"[{section}] {key}: "
        elif section:
            where = f"[{section}]: "
        super().__init__(f"{where}{message}")


class DimensionError(ProblemFormatError):
    """Expression references a variable outside the declared dimensions"""


class InfeasiblePointError(BilevelError, ValueError):
    """Point violates a lower-level constraint beyond the active-set tolerance"""

    def __init__(self, message: str, violations: Optional[List[int]] = None):
        self.violations = violations or []
        super().__init__(message)


class PreconditionError(BilevelError, ValueError):
    """Operation called outside the situation it is defined for"""


class UpperConstraintsError(PreconditionError):
    """Optimality checks only cover problems without upper-level constraints"""


class CaseNotIdentifiedError(PreconditionError):
    """Point is not simple, so no optimality case applies"""


class NumericalError(BilevelError, RuntimeError):
    """Linear algebra or Newton iteration broke down"""


class SingularJacobianError(NumericalError):
    """Active-set system Jacobian is numerically singular"""

    def __init__(self, message: str, directions: Any = None, singular_values: Any = None):
        self.directions = directions
        self.singular_values = singular_values
        super().__init__(message)


class CorrectorDivergenceError(NumericalError):
    """Corrector failed even after step halving; keeps the last good sample"""

    def __init__(self, message: str, last_sample: Any = None):
        self.last_sample = last_sample
        super().__init__(message)


class InconclusiveError(BilevelError):
    """A sampled or searched result that cannot support a verdict"""


class GlobalSearchInconclusiveError(InconclusiveError):
    """Lower-level minimum found on the search-box boundary"""
