"""
Built-in Corpus

Named problems shipped with the package, each with the expectations it
has been verified against. Every expectation carries a provenance tag:

- PAPER: value stated for the instance in the literature
- TRIVIAL: follows from the problem data by inspection
- DERIVED: computed by an independent oracle, which is named

corpus_check runs them all and is the end-to-end gate of the package.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.bilevel_solver import solve
from services.calmness_verifier import F_SET, estimate_uwsm_modulus
from services.config import get_settings
from services.errors import BilevelError, PreconditionError, ProblemFormatError
from services.lower_level import solve_lower_global
from services.multiplier_analysis import fj_multipliers, kkt_multipliers
from services.problem_model import BilevelProblem, load_problem_file
from services.stationarity_checker import (
    NOT_APPLICABLE, SATISFIED, VIOLATED, cross_validate, mpcc_licq,
)
from services.type_classifier import classify_point, classify_simplicity

logger = logging.getLogger(__name__)

PAPER = "PAPER"
TRIVIAL = "TRIVIAL"
DERIVED = "DERIVED"
TAGS = (PAPER, TRIVIAL, DERIVED)

BUILTIN_PREFIX = "builtin:"
PROBLEM_DIR = Path(__file__).parent / "problems"

Check = Callable[[BilevelProblem], Tuple[bool, Any]]


@dataclass(frozen=True)
class Expectation:
    """One verified statement about a corpus problem"""
    label: str
    tag: str
    check: Check = field(repr=False)
    oracle: str = ""

    def __post_init__(self):
        if self.tag not in TAGS:
            raise PreconditionError(f"Unknown provenance tag '{self.tag}' on '{self.label}'")
        if self.tag == DERIVED and not self.oracle:
            raise PreconditionError(f"DERIVED expectation '{self.label}' must name its oracle")


@dataclass(frozen=True)
class CorpusEntry:
    name: str
    filename: str
    expectations: Tuple[Expectation, ...] = ()

    def load(self) -> BilevelProblem:
        return load_problem_file(str(problem_dir() / self.filename))


@dataclass
class ExpectationResult:
    entry: str
    label: str
    tag: str
    oracle: str
    passed: bool
    observed: Any = None
    error: Optional[str] = None

    def to_dict(self) -> Dict:
        out = {
            "entry": self.entry,
            "expectation": self.label,
            "tag": self.tag,
            "passed": self.passed,
            "observed": self.observed,
        }
        if self.oracle:
            out["oracle"] = self.oracle
        if self.error:
            out["error"] = self.error
        return out


@dataclass
class CorpusSummary:
    results: List[ExpectationResult] = field(default_factory=list)
    tolerances: Dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failures(self) -> List[ExpectationResult]:
        return [r for r in self.results if not r.passed]

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "total": len(self.results),
            "failed": len(self.failures),
            "failed_entries": sorted({r.entry for r in self.failures}),
            "tolerance_overrides": self.tolerances,
            "results": [r.to_dict() for r in self.results],
        }


def problem_dir() -> Path:
    override = get_settings().corpus_dir
    return Path(override) if override else PROBLEM_DIR


# Expectation builders

def _close(a, b, tol: float) -> bool:
    return bool(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float)), initial=0.0) <= tol)


def _upper(P: BilevelProblem, F: Optional[str]) -> BilevelProblem:
    return P.with_upper(F) if F else P


def type_is(x: float, y: Sequence[float], label: str, tag: str, oracle: str = "") -> Expectation:
    def check(P):
        observed = classify_point(P, x, y).label
        return observed == label, observed
    return Expectation(f"type at (x={x}, y={list(y)}) is {label}", tag, check, oracle)


def case_is(x: float, y: Sequence[float], case: str, tag: str, oracle: str = "") -> Expectation:
    def check(P):
        observed = classify_simplicity(P, x, y_query=y).case
        return observed == case, observed
    return Expectation(f"simplicity at x={x} is Case {case}", tag, check, oracle)


def minimizers_are(x: float, points: Sequence[Sequence[float]], tag: str, oracle: str = "",
                   tol: float = 1e-6) -> Expectation:
    def check(P):
        members = sorted((mem.y.tolist() for mem in solve_lower_global(P, x).members))
        expected = sorted(list(map(float, p)) for p in points)
        ok = len(members) == len(expected) and all(_close(a, b, tol) for a, b in zip(members, expected))
        return ok, members
    return Expectation(f"S({x}) = {[list(p) for p in points]}", tag, check, oracle)


def fj_set_is(x: float, y: Sequence[float], kind: str, vertices: Sequence[Sequence[float]],
              tag: str, oracle: str = "") -> Expectation:
    def check(P):
        fj = fj_multipliers(P, x, y)
        observed = {"kind": fj.kind, "vertices": [v.tolist() for v in fj.vertices]}
        ok = fj.kind == kind and all(fj.contains(v) for v in vertices)
        return ok, observed
    return Expectation(f"FJ multipliers at (x={x}, y={list(y)}) form a {kind}", tag, check, oracle)


def kkt_set_is(x: float, y: Sequence[float], kind: str, tag: str, oracle: str = "") -> Expectation:
    def check(P):
        observed = kkt_multipliers(P, x, y).kind
        return observed == kind, observed
    return Expectation(f"KKT multipliers at (x={x}, y={list(y)}) form a {kind}", tag, check, oracle)


def mpcc_licq_is(x: float, y: Sequence[float], u: Sequence[float], full: bool, tag: str,
                 u0: Optional[float] = None, oracle: str = "") -> Expectation:
    def check(P):
        report = mpcc_licq(P, x, y, u, u0=u0)
        return report.full_column_rank == full, {"rank": report.rank, "columns": int(report.matrix.shape[1])}
    state = "full column rank" if full else "rank-deficient"
    return Expectation(f"MPCC-LICQ at (x={x}, y={list(y)}) is {state}", tag, check, oracle)


def optimality_is(x: float, y: Sequence[float], verdict: str, tag: str, F: Optional[str] = None,
                  oracle: str = "") -> Expectation:
    """Direct verdict equals `verdict` and the implicit form agrees"""
    def check(P):
        result = cross_validate(_upper(P, F), x, y)
        observed = {"direct": result.direct.verdict, "implicit": result.implicit.verdict}
        return result.agreement and result.direct.verdict == verdict, observed
    suffix = f" with F = {F}" if F else ""
    return Expectation(f"optimality at (x={x}, y={list(y)}){suffix} is {verdict}", tag, check, oracle)


def alpha_is(x: float, y: Sequence[float], alpha: float, tag: str, oracle: str = "",
             tol: float = 1e-6) -> Expectation:
    def check(P):
        observed = classify_simplicity(P, x, y_query=y).alpha
        return observed is not None and abs(observed - alpha) <= tol * max(1.0, abs(alpha)), observed
    return Expectation(f"alpha at x={x} is {alpha}", tag, check, oracle)


def solve_is(x: float, y: Sequence[float], F: float, tag: str, oracle: str = "",
             tol: float = 1e-4) -> Expectation:
    def check(P):
        result = solve(P)
        ok = abs(result.x - x) <= tol and _close(result.y, y, tol) and abs(result.F - F) <= tol
        return ok, {"x": result.x, "y": result.y.tolist(), "F": result.F}
    return Expectation(f"bilevel solve gives x = {x}, F = {F}", tag, check, oracle)


def uwsm_is(x: float, y: Sequence[float], verdict: str, tag: str, radius: float = 0.2,
            samples: int = 80, oracle: str = "") -> Expectation:
    def check(P):
        report = estimate_uwsm_modulus(P, x, y, radius, samples=samples, condition=F_SET,
                                       seed=get_settings().seed)
        return report.verdict == verdict, {"verdict": report.verdict, "modulus": report.modulus}
    return Expectation(f"UWSM over Sigma_f at x={x} is {verdict}", tag, check, oracle)


GRID_ORACLE = "grid bilevel solve: dense x-grid, brute-force lower-level grid per x"
HAND_ORACLE = "closed-form lower-level solution worked by hand"

CORPUS: Tuple[CorpusEntry, ...] = (
    CorpusEntry("example-js", "example-js.blp", (
        type_is(0.0, (0, 0), "4", PAPER),
        case_is(0.0, (0, 0), "I", PAPER),
        fj_set_is(0.0, (0, 0), "singleton", [(0, 1)], PAPER),
        kkt_set_is(0.0, (0, 0), "empty", PAPER),
        mpcc_licq_is(0.0, (0, 0), (1,), True, PAPER, u0=0.0),
        optimality_is(0.0, (0, 0), SATISFIED, PAPER),
        optimality_is(0.0, (0, 0), VIOLATED, DERIVED, F="x - y1", oracle=HAND_ORACLE),
        minimizers_are(0.25, [(0.5, 0.0)], PAPER),
    )),
    CorpusEntry("example-js-m1", "example-js-m1.blp", (
        type_is(0.0, (0,), "4", PAPER),
        uwsm_is(0.0, (0,), "holds-with-L", PAPER),
    )),
    CorpusEntry("quadratic", "quadratic.blp", (
        type_is(0.5, (0.5,), "1", TRIVIAL),
        optimality_is(0.5, (0.5,), SATISFIED, DERIVED, oracle=HAND_ORACLE),
        optimality_is(0.0, (0.0,), VIOLATED, DERIVED, oracle=HAND_ORACLE),
        solve_is(0.5, (0.5,), 0.5, DERIVED, oracle=GRID_ORACLE),
    )),
    CorpusEntry("type2-kink", "type2-kink.blp", (
        type_is(0.0, (0,), "2", TRIVIAL),
        optimality_is(0.0, (0,), SATISFIED, DERIVED, oracle=HAND_ORACLE),
        optimality_is(0.0, (0,), VIOLATED, DERIVED, F="x + y1", oracle=HAND_ORACLE),
    )),
    CorpusEntry("type51-corner", "type51-corner.blp", (
        type_is(0.0, (0,), "5-1", TRIVIAL),
        kkt_set_is(0.0, (0,), "ray", TRIVIAL),
        optimality_is(0.0, (0,), SATISFIED, DERIVED, oracle=HAND_ORACLE),
        optimality_is(0.0, (0,), VIOLATED, DERIVED, F="y1", oracle=HAND_ORACLE),
    )),
    CorpusEntry("type52-corner", "type52-corner.blp", (
        type_is(0.0, (0, 0), "5-2", DERIVED, oracle=HAND_ORACLE),
        kkt_set_is(0.0, (0, 0), "segment", DERIVED, oracle=HAND_ORACLE),
        optimality_is(0.0, (0, 0), SATISFIED, DERIVED, oracle=GRID_ORACLE),
        optimality_is(0.0, (0, 0), VIOLATED, DERIVED, F="x + 2*y1", oracle=GRID_ORACLE),
    )),
    CorpusEntry("double-well", "double-well.blp", (
        minimizers_are(0.0, [(-1.0,), (1.0,)], TRIVIAL),
        case_is(0.0, (-1,), "II", TRIVIAL),
        alpha_is(0.0, (-1,), 2.0, DERIVED, oracle=HAND_ORACLE),
        optimality_is(0.0, (-1,), SATISFIED, DERIVED, oracle=HAND_ORACLE),
        optimality_is(0.0, (-1,), VIOLATED, DERIVED, F="y1", oracle=HAND_ORACLE),
    )),
    CorpusEntry("principal-agent-binary", "principal-agent-binary.blp", (
        type_is(1 / 3, (1 / 3,), "1", DERIVED, oracle=HAND_ORACLE),
        optimality_is(1 / 3, (1 / 3,), SATISFIED, DERIVED, oracle=GRID_ORACLE),
        optimality_is(0.5, (0.5,), VIOLATED, DERIVED, oracle=GRID_ORACLE),
        solve_is(1 / 3, (1 / 3,), -5 / 108, DERIVED, oracle=GRID_ORACLE),
    )),
    CorpusEntry("duplicate-constraint", "duplicate-constraint.blp", (
        kkt_set_is(0.0, (0,), "segment", TRIVIAL),
        mpcc_licq_is(0.0, (0,), (1, 1), False, TRIVIAL),
        type_is(0.0, (0,), "not-classifiable", TRIVIAL),
        optimality_is(0.0, (0,), NOT_APPLICABLE, TRIVIAL),
    )),
    CorpusEntry("near-duplicate", "near-duplicate.blp", (
        type_is(0.0, (0,), "5-2", TRIVIAL),
        optimality_is(0.0, (0,), SATISFIED, DERIVED, oracle=HAND_ORACLE),
    )),
)


def get_entry(name: str) -> CorpusEntry:
    for entry in CORPUS:
        if entry.name == name:
            return entry
    raise ProblemFormatError(f"Unknown builtin problem '{name}'; available: {[e.name for e in CORPUS]}")


def resolve_problem(source: str) -> BilevelProblem:
    """Load a problem from a file path or a builtin:<name> reference"""
    if source.startswith(BUILTIN_PREFIX):
        return get_entry(source[len(BUILTIN_PREFIX):]).load()
    return load_problem_file(source)


def corpus_check(overrides: Optional[Dict[str, Any]] = None,
                 entries: Optional[Sequence[CorpusEntry]] = None) -> CorpusSummary:
    """
    Run every expectation of every entry

    Args:
        overrides: Tolerance overrides applied to every problem
        entries: Entries to run, defaulting to the built-in corpus

    Returns:
        CorpusSummary; a raised BilevelError counts as a failure of
        the expectation that raised it
    """
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    summary = CorpusSummary(tolerances=overrides)
    for entry in CORPUS if entries is None else entries:
        P = entry.load().with_tolerances(**overrides)
        for expectation in entry.expectations:
            result = ExpectationResult(entry.name, expectation.label, expectation.tag, expectation.oracle, False)
            try:
                result.passed, result.observed = expectation.check(P)
            except BilevelError as e:
                result.error = f"{type(e).__name__}: {e}"
            if not result.passed:
                logger.error(f"Corpus mismatch in '{entry.name}': {expectation.label} (observed {result.observed})")
            summary.results.append(result)
    logger.info(f"Corpus check: {len(summary.results) - len(summary.failures)}/{len(summary.results)} passed")
    return summary
