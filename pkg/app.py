"""
Bilevel Analysis CLI

Command-line front end: loads a problem (file path or builtin:<name>),
runs one analysis verb and prints a single JSON report on stdout.
Tabular artifacts are written as CSV only when --out is given.

Exit codes: 0 verdict computed, 1 verdict with inconclusive elements
(or corpus mismatch), 2 usage or input error, 3 numerical failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

sys.path.append(str(Path(__file__).parent))

from services.bilevel_solver import DEFAULT_POINTS, solve
from services.calmness_verifier import (
    CALMNESS_CONDITIONS, CONDITIONS, F_SET, FJ,
    estimate_peb_modulus, estimate_uwsm_modulus, verify_partial_calmness,
)
from services.config import get_settings
from services.continuation import BranchSeed, solution_map, trace_branch
from services.corpus import corpus_check, resolve_problem
from services.errors import (
    BilevelError, ExprDomainError, ExprSyntaxError, InconclusiveError, InfeasiblePointError,
    NumericalError, PreconditionError, ProblemFormatError,
)
from services.exporter import artifact_path, jsonable, write_csv
from services.lower_level import solve_lower_global
from services.multiplier_analysis import fj_multipliers, kkt_multipliers
from services.problem_model import BilevelProblem, check_point
from services.stationarity_checker import (
    INCONCLUSIVE, check_unconstrained_corollary, cross_validate, mpcc_licq,
)
from services.type_classifier import branch_seed_at, classify_point, classify_simplicity

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INCONCLUSIVE = 1
EXIT_INPUT = 2
EXIT_NUMERICAL = 3

INPUT_ERRORS = (ProblemFormatError, ExprSyntaxError, ExprDomainError, InfeasiblePointError, PreconditionError)
NUMERICAL_ERRORS = (NumericalError, np.linalg.LinAlgError, FloatingPointError)


class CommandReport(BaseModel):
    """The JSON document every command prints"""
    model_config = ConfigDict(ser_json_inf_nan="null")

    command: str
    problem: Optional[str] = None
    status: str = "ok"
    exit_code: int = EXIT_OK
    result: Dict[str, Any] = Field(default_factory=dict)
    artifacts: List[str] = Field(default_factory=list)
    error: Optional[Dict[str, str]] = None


class _Outcome:
    def __init__(self, result: Dict[str, Any], inconclusive: bool = False, artifacts: Sequence[Path] = ()):
        self.result = result
        self.inconclusive = inconclusive
        self.artifacts = [str(p) for p in artifacts]


def _vector(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


# Parser

def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=settings.seed, help="seed for randomized sampling")
    common.add_argument("--out", help="directory or .csv path for tabular artifacts")
    for name, kind in (("act", float), ("rank", float), ("mult", float), ("eig", float),
                       ("res", float), ("grid", int), ("starts", int)):
        common.add_argument(f"--tol-{name}", type=kind, dest=f"tol_{name}", help=f"override tolerance '{name}'")

    problem = argparse.ArgumentParser(add_help=False, parents=[common])
    problem.add_argument("--problem", required=True, help="problem file path or builtin:<name>")
    problem.add_argument("--F", dest="F", help="replace the upper-level objective")

    point = argparse.ArgumentParser(add_help=False)
    point.add_argument("--x", type=float, required=True)
    point.add_argument("--y", type=_vector, required=True, help="comma-separated; use --y=-1,0 for negatives")

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--radius", type=float, default=0.2)
    sampling.add_argument("--samples", type=int, default=200)

    parser = argparse.ArgumentParser(prog="bilevel", description="One-parameter bilevel program analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    classify = sub.add_parser("classify", parents=[problem], help="type of a lower-level point and simplicity of S(x)")
    classify.add_argument("--x", type=float, required=True)
    classify.add_argument("--y", type=_vector, help="point of interest; omitted: classify S(x) only")

    trace = sub.add_parser("trace", parents=[problem, point], help="trace the branch through a point")
    trace.add_argument("--x-min", type=float)
    trace.add_argument("--x-max", type=float)
    trace.add_argument("--step", type=float, default=0.01)
    trace.add_argument("--direction", choices=("both", "up", "down"), default="both")

    lower = sub.add_parser("solve-lower", parents=[problem], help="global minimizers S(x) and V(x)")
    lower.add_argument("--x", type=float, required=True)

    value = sub.add_parser("value-function", parents=[problem], help="S(x) and V(x) over an x-grid")
    value.add_argument("--x-min", type=float)
    value.add_argument("--x-max", type=float)
    value.add_argument("--points", type=int, default=101)

    peb = sub.add_parser("verify-peb", parents=[problem, point, sampling], help="partial error bound modulus")
    peb.add_argument("--v-max", type=float, default=1.0)
    peb.add_argument("--condition", choices=CONDITIONS, default=FJ)

    uwsm = sub.add_parser("verify-uwsm", parents=[problem, point, sampling], help="uniform weak sharp minimum modulus")
    uwsm.add_argument("--v-max", type=float, default=float("inf"))
    uwsm.add_argument("--condition", choices=CONDITIONS, default=F_SET)

    calm = sub.add_parser("verify-calmness", parents=[problem, point, sampling], help="partial calmness at a given mu")
    calm.add_argument("--mu", type=float, required=True)
    calm.add_argument("--condition", choices=CALMNESS_CONDITIONS, default=FJ)

    sub.add_parser("check-stationarity", parents=[problem, point], help="optimality conditions, direct and implicit")

    licq = sub.add_parser("mpcc-licq", parents=[problem, point], help="MPCC-LICQ of the combined program")
    licq.add_argument("--u", type=_vector, help="lower-level multiplier; default: a vertex of the multiplier set")
    licq.add_argument("--u0", type=float, help="FJ multiplier of f; selects the FJ variant")

    solve_parser = sub.add_parser("solve", parents=[problem], help="desk-scale bilevel solve")
    solve_parser.add_argument("--points", type=int, default=DEFAULT_POINTS)

    sub.add_parser("corpus", parents=[common], help="check every built-in problem against its expectations")
    return parser


def _tolerance_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    names = ("act", "rank", "mult", "eig", "res", "grid", "starts")
    return {n: getattr(args, f"tol_{n}") for n in names if getattr(args, f"tol_{n}", None) is not None}


def load(args: argparse.Namespace) -> BilevelProblem:
    P = resolve_problem(args.problem).with_tolerances(**_tolerance_overrides(args))
    if getattr(args, "F", None):
        P = P.with_upper(args.F)
    return P


# Commands

def cmd_classify(P: BilevelProblem, args) -> _Outcome:
    result: Dict[str, Any] = {}
    if args.y is not None:
        result.update(classify_point(P, args.x, args.y).to_dict())
    try:
        simplicity = classify_simplicity(P, args.x, y_query=args.y)
    except InconclusiveError as e:
        result.update({"case": None, "simplicity_error": str(e)})
        return _Outcome(result, inconclusive=True)
    result["case"] = simplicity.case
    result["simplicity"] = simplicity.to_dict()
    return _Outcome(result)


def cmd_trace(P: BilevelProblem, args) -> _Outcome:
    y, u, J = branch_seed_at(P, args.x, args.y)
    x_range = (P.box.x[0] if args.x_min is None else args.x_min, P.box.x[1] if args.x_max is None else args.x_max)
    direction = {"both": None, "up": 1, "down": -1}[args.direction]
    segment = trace_branch(P, BranchSeed(args.x, y, u, J), x_range, args.step, direction=direction)
    artifacts = []
    if args.out:
        artifacts.append(write_csv(segment.to_frame(P.m, P.p), artifact_path(args.out, "branch")))
    return _Outcome(segment.to_dict(), artifacts=artifacts)


def cmd_solve_lower(P: BilevelProblem, args) -> _Outcome:
    solution = solve_lower_global(P, args.x)
    return _Outcome(solution.to_dict(), inconclusive=solution.inconclusive)


def cmd_value_function(P: BilevelProblem, args) -> _Outcome:
    lo = P.box.x[0] if args.x_min is None else args.x_min
    hi = P.box.x[1] if args.x_max is None else args.x_max
    if not lo < hi or args.points < 2:
        raise PreconditionError(f"Need x-min < x-max and at least 2 points, got [{lo}, {hi}] with {args.points}")
    smap = solution_map(P, np.linspace(lo, hi, args.points), classify=True)
    values = [v if np.isfinite(v) else None for v in smap.values]
    inconclusive = [e.x for e in smap.entries if e.solution.inconclusive]
    artifacts = []
    if args.out:
        artifacts.append(write_csv(smap.to_frame(P.m, P.p), artifact_path(args.out, "solution_map")))
    result = {"x": smap.xs.tolist(), "V": values, "branches": smap.branch_ids(), "inconclusive_x": inconclusive}
    return _Outcome(result, inconclusive=bool(inconclusive), artifacts=artifacts)


def _sampled(report, args, stem: str) -> _Outcome:
    artifacts = []
    if args.out and report.trace is not None:
        artifacts.append(write_csv(report.trace.to_frame(), artifact_path(args.out, stem)))
    inconclusive = any(d["reason"] == "value function inconclusive" for d in report.trace.dropped)
    return _Outcome(report.to_dict(), inconclusive=inconclusive, artifacts=artifacts)


def cmd_verify_peb(P: BilevelProblem, args) -> _Outcome:
    report = estimate_peb_modulus(P, args.x, args.y, args.radius, v_max=args.v_max, samples=args.samples,
                                  condition=args.condition, seed=args.seed)
    return _sampled(report, args, "peb_samples")


def cmd_verify_uwsm(P: BilevelProblem, args) -> _Outcome:
    report = estimate_uwsm_modulus(P, args.x, args.y, args.radius, samples=args.samples,
                                   condition=args.condition, v_max=args.v_max, seed=args.seed)
    return _sampled(report, args, "uwsm_samples")


def cmd_verify_calmness(P: BilevelProblem, args) -> _Outcome:
    report = verify_partial_calmness(P, args.x, args.y, args.mu, args.radius, samples=args.samples,
                                     condition=args.condition, seed=args.seed)
    return _sampled(report, args, "calmness_samples")


def cmd_check_stationarity(P: BilevelProblem, args) -> _Outcome:
    result = cross_validate(P, args.x, args.y)
    out = result.to_dict()
    inconclusive = not result.agreement or INCONCLUSIVE in (result.direct.verdict, result.implicit.verdict)
    if P.p == 0 and P.q == 0 and result.classification is not None and result.classification.case:
        try:
            out["unconstrained"] = check_unconstrained_corollary(P, args.x, args.y, result.classification).to_dict()
        except PreconditionError as e:
            out["unconstrained"] = {"verdict": "not-applicable", "reason": str(e)}
    return _Outcome(out, inconclusive=inconclusive)


def cmd_mpcc_licq(P: BilevelProblem, args) -> _Outcome:
    u, u0 = args.u, args.u0
    if u is None:
        y = check_point(P, args.y)
        kkt = kkt_multipliers(P, args.x, y)
        if not kkt.is_empty:
            u = kkt.base
        else:
            fj = fj_multipliers(P, args.x, y)
            if fj.is_empty:
                raise PreconditionError("Point is not an FJ point; no multiplier to test")
            u0, u = float(fj.base[0]), fj.base[1:]
    report = mpcc_licq(P, args.x, args.y, u, u0=u0)
    return _Outcome(report.to_dict())


def cmd_solve(P: BilevelProblem, args) -> _Outcome:
    result = solve(P, points=args.points)
    return _Outcome(result.to_dict(), inconclusive=result.inconclusive_points > 0)


COMMANDS = {
    "classify": cmd_classify,
    "trace": cmd_trace,
    "solve-lower": cmd_solve_lower,
    "value-function": cmd_value_function,
    "verify-peb": cmd_verify_peb,
    "verify-uwsm": cmd_verify_uwsm,
    "verify-calmness": cmd_verify_calmness,
    "check-stationarity": cmd_check_stationarity,
    "mpcc-licq": cmd_mpcc_licq,
    "solve": cmd_solve,
}


def _execute(args: argparse.Namespace) -> CommandReport:
    report = CommandReport(command=args.command, problem=getattr(args, "problem", None))
    try:
        if args.command == "corpus":
            summary = corpus_check(_tolerance_overrides(args))
            report.result = jsonable(summary.to_dict())
            if not summary.passed:
                report.status, report.exit_code = "mismatch", EXIT_INCONCLUSIVE
            return report
        outcome = COMMANDS[args.command](load(args), args)
    except INPUT_ERRORS as e:
        report.status, report.exit_code = "error", EXIT_INPUT
        report.error = {"type": type(e).__name__, "message": str(e)}
        return report
    except NUMERICAL_ERRORS as e:
        report.status, report.exit_code = "error", EXIT_NUMERICAL
        report.error = {"type": type(e).__name__, "message": str(e)}
        return report
    except BilevelError as e:
        report.status, report.exit_code = "inconclusive", EXIT_INCONCLUSIVE
        report.error = {"type": type(e).__name__, "message": str(e)}
        return report

    report.result = jsonable(outcome.result)
    report.artifacts = outcome.artifacts
    if outcome.inconclusive:
        report.status, report.exit_code = "inconclusive", EXIT_INCONCLUSIVE
    return report


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, run the command, print its JSON report and return the exit code"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_INPUT if e.code not in (0, None) else EXIT_OK
    report = _execute(args)
    print(report.model_dump_json(indent=2))
    if report.error:
        logger.error(f"{args.command} failed: {report.error['type']}: {report.error['message']}")
    return report.exit_code


def main():
    settings = get_settings()
    logging.basicConfig(
        level=getattr(logging, settings.log_level, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[logging.StreamHandler(sys.stderr)],
    )
    sys.exit(run())


if __name__ == "__main__":
    main()
