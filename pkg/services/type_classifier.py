"""
Type Classifier

Decides the nondegeneracy conditions (LICQ, SC, SOC) and MFCQ at a
lower-level stationary point, assigns one of the generic types

    1    LICQ, SC and SOC hold
    2    LICQ and SOC hold, exactly one active multiplier vanishes
    3    LICQ and SC hold, exactly one reduced-Hessian eigenvalue vanishes
    4    LICQ fails with rank(grad_y g_J0) = |J0| - 1 < m, no KKT multiplier
    5-1  rank of the (x, y)-gradients of g_J0 is |J0| = m + 1, MFCQ fails
    5-2  same rank condition, MFCQ holds

tested in that order, and classifies a global solution as simple
(Case I: unique minimizer of type 1, 2, 4, 5-1 or 5-2; Case II: two
type-1 minimizers whose objective gap has nonzero slope alpha).
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.branch_system import implicit_derivatives, newton_correct, reduced_hessian
from services.errors import (
    ExprDomainError, GlobalSearchInconclusiveError, PreconditionError, SingularJacobianError,
)
from services.linalg import least_squares, numerical_rank, singular_values, strict_direction
from services.lower_level import solve_lower_global, snap_to_query
from services.multiplier_analysis import (
    MultiplierSet, StationarityFlags, fj_multipliers, kkt_multipliers, stationarity_status,
)
from services.problem_model import BilevelProblem, active_set, check_point

logger = logging.getLogger(__name__)

NOT_CLASSIFIABLE = "not-classifiable"
SIMPLE_TYPES = ("1", "2", "4", "5-1", "5-2")

CASE_I = "I"
CASE_II = "II"
NOT_SIMPLE = "not-simple"

ALPHA_FD_STEP = 1e-5


@dataclass
class Check:
    """Outcome of one condition; holds is None when the condition is undefined"""
    holds: Optional[bool]
    evidence: Dict = field(default_factory=dict)


@dataclass
class NDReport:
    licq: Check
    mfcq: Check
    sc: Optional[Check] = None
    soc: Optional[Check] = None
    crcq: Optional[Check] = None
    multipliers: Optional[np.ndarray] = None
    tangent_basis: Optional[np.ndarray] = None

    def to_dict(self) -> Dict:
        out = {"licq": _check_dict(self.licq), "mfcq": _check_dict(self.mfcq)}
        if self.sc is not None:
            out["sc"] = _check_dict(self.sc)
        if self.soc is not None:
            out["soc"] = _check_dict(self.soc)
        if self.crcq is not None:
            out["crcq"] = _check_dict(self.crcq)
        if self.multipliers is not None:
            out["lagrange_multipliers"] = self.multipliers.tolist()
        if self.tangent_basis is not None:
            out["tangent_basis"] = self.tangent_basis.tolist()
        return out


def _check_dict(check: Check) -> Dict:
    evidence = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in check.evidence.items()}
    return {"holds": check.holds, **evidence}


@dataclass
class ClassificationReport:
    x: float
    y: np.ndarray
    label: str
    reason: str
    active: Tuple[int, ...] = ()
    nd: Optional[NDReport] = None
    flags: Optional[StationarityFlags] = None
    fj: Optional[MultiplierSet] = None
    kkt: Optional[MultiplierSet] = None
    case: Optional[str] = None
    alpha: Optional[float] = None
    alpha_fd: Optional[float] = None
    minimizers: List[np.ndarray] = field(default_factory=list)
    member_reports: List["ClassificationReport"] = field(default_factory=list)
    ties: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict:
        out = {
            "x": self.x,
            "y": self.y.tolist(),
            "type": self.label,
            "reason": self.reason,
            "active_set": [j + 1 for j in self.active],
        }
        if self.ties:
            out["ties"] = [j + 1 for j in self.ties]
        if self.flags is not None:
            out["stationarity"] = self.flags.to_dict()
        if self.nd is not None:
            out["nd"] = self.nd.to_dict()
        if self.fj is not None:
            out["fj_multipliers"] = self.fj.to_dict()
        if self.kkt is not None:
            out["kkt_multipliers"] = self.kkt.to_dict()
        if self.case is not None:
            out["case"] = self.case
            out["minimizers"] = [y.tolist() for y in self.minimizers]
        if self.alpha is not None:
            out["alpha"] = self.alpha
            out["alpha_finite_difference"] = self.alpha_fd
        if self.member_reports:
            out["members"] = [r.to_dict() for r in self.member_reports]
        return out


def lagrange_multipliers(P: BilevelProblem, x: float, y, J: Sequence[int]) -> Tuple[np.ndarray, float]:
    """
    Sign-free multipliers u with grad_y f + sum_{j in J} u_j grad_y g_j = 0

    Returns:
        Tuple of (u of length p, max-abs residual)
    """
    u = np.zeros(P.p)
    if not J:
        return u, float(np.max(np.abs(P.f.grad_y(x, y))))
    u_J, residual = least_squares(P.g_grad_y(x, y, J).T, -P.f.grad_y(x, y))
    u[list(J)] = u_J
    return u, residual


def check_licq(P: BilevelProblem, x: float, y: Sequence[float]) -> Check:
    """LICQ: the active y-gradients are linearly independent"""
    y = check_point(P, y)
    J = active_set(P, x, y)
    Gy = P.g_grad_y(x, y, J)
    rank = numerical_rank(Gy, P.tol.rank)
    return Check(rank == len(J), {
        "rank": rank,
        "active_count": len(J),
        "singular_values": singular_values(Gy),
        "tolerance": P.tol.rank,
    })


def check_mfcq(P: BilevelProblem, x: float, y: Sequence[float]) -> Check:
    """
    MFCQ: some d has grad_y g_j . d < 0 for all active j

    Evidence carries the direction and margin when it holds, or a Gordan
    certificate lam >= 0, sum lam = 1, sum lam_j grad_y g_j = 0 otherwise.
    """
    y = check_point(P, y)
    J = active_set(P, x, y)
    holds, d, margin, gordan = strict_direction(P.g_grad_y(x, y, J), P.tol.rank)
    evidence = {"direction": d, "margin": margin}
    if gordan is not None:
        full = np.zeros(P.p)
        full[list(J)] = gordan
        evidence["gordan_certificate"] = full
    return Check(holds, evidence)


def check_soc(P: BilevelProblem, x: float, y: Sequence[float], u: Sequence[float]) -> Check:
    """
    SOC: V^T H_yy(f + u^T g) V is nonsingular, V spanning the tangent
    space of the active constraints. Undefined (holds None) when the
    active gradients are rank-deficient.
    """
    y = check_point(P, y)
    J = active_set(P, x, y)
    Gy = P.g_grad_y(x, y, J)
    if numerical_rank(Gy, P.tol.rank) < len(J):
        return Check(None, {"status": "tangent space undefined"})
    R, V = reduced_hessian(P, x, y, np.asarray(u, dtype=float), J)
    eigenvalues = np.linalg.eigvalsh(R) if R.size else np.zeros(0)
    holds = bool(np.all(np.abs(eigenvalues) > P.tol.eig))
    return Check(holds, {
        "eigenvalues": eigenvalues,
        "tangent_dimension": V.shape[1],
        "tolerance": P.tol.eig,
        "tangent_basis": V,
    })


def check_crcq(P: BilevelProblem, x: float, y: Sequence[float], samples: int = 24,
               radius: float = 1e-3, seed: int = 0) -> Check:
    """
    Sampled constant-rank heuristic: for every subset of J0 the rank of
    its y-gradients at random nearby points equals the rank at (x, y).
    Evidence only; a finite sample cannot establish constant rank.
    """
    y = check_point(P, y)
    J = active_set(P, x, y)
    rng = np.random.default_rng(seed)
    tol = max(P.tol.rank, 1e-6)
    failures = []
    perturbations = rng.uniform(-radius, radius, size=(samples, 1 + P.m))
    for size in range(1, len(J) + 1):
        for subset in itertools.combinations(J, size):
            base = numerical_rank(P.g_grad_y(x, y, subset), tol)
            for delta in perturbations:
                try:
                    r = numerical_rank(P.g_grad_y(x + delta[0], y + delta[1:], subset), tol)
                except ExprDomainError:
                    continue
                if r != base:
                    failures.append({"subset": [j + 1 for j in subset], "base_rank": base, "sampled_rank": r})
                    break
    return Check(not failures, {"samples": samples, "radius": radius, "rank_changes": failures})


def _justify(label: str, nd: NDReport) -> str:
    licq = nd.licq.evidence
    parts = [f"rank(grad_y g_J0) = {licq['rank']}, |J0| = {licq['active_count']}"]
    if nd.sc is not None:
        parts.append(f"vanishing multipliers {[j + 1 for j in nd.sc.evidence['vanishing']]}")
    if nd.soc is not None and nd.soc.holds is not None:
        eig = nd.soc.evidence["eigenvalues"]
        parts.append(f"reduced-Hessian eigenvalues {np.round(eig, 12).tolist()}")
    parts.append(f"MFCQ {'holds' if nd.mfcq.holds else 'fails'}")
    return f"Type {label}: " + "; ".join(parts)


def classify_point(P: BilevelProblem, x: float, y: Sequence[float]) -> ClassificationReport:
    """
    Assign the generic type of a lower-level g.c. point

    Args:
        P: Problem
        x, y: Lower-level feasible point

    Returns:
        ClassificationReport with exactly one label and its evidence;
        not-classifiable (with the failing condition as reason) for
        non-stationary or non-generic points

    Raises:
        InfeasiblePointError: y violates a lower-level constraint
    """
    y = check_point(P, y)
    x = float(x)
    tol = P.tol
    J = active_set(P, x, y)
    flags = stationarity_status(P, x, y)
    fj = fj_multipliers(P, x, y)
    kkt = kkt_multipliers(P, x, y)
    licq = check_licq(P, x, y)
    mfcq = check_mfcq(P, x, y)
    nd = NDReport(licq=licq, mfcq=mfcq)
    report = ClassificationReport(x, y, NOT_CLASSIFIABLE, "", J, nd, flags, fj, kkt)

    if not flags.is_gc:
        report.reason = "not stationary: no nonzero Lagrange vector exists"
        return report

    if licq.holds:
        u, residual = lagrange_multipliers(P, x, y, J)
        nd.multipliers = u
        vanishing = [j for j in J if abs(u[j]) <= tol.mult]
        nd.sc = Check(not vanishing, {"vanishing": vanishing, "multipliers": u, "residual": residual})
        nd.soc = check_soc(P, x, y, u)
        nd.tangent_basis = nd.soc.evidence.pop("tangent_basis", None)
        eigenvalues = nd.soc.evidence["eigenvalues"]
        near_zero = [k for k, lam in enumerate(eigenvalues) if abs(lam) < tol.eig]

        if nd.sc.holds and nd.soc.holds:
            report.label = "1"
        elif nd.soc.holds and len(vanishing) == 1:
            report.label = "2"
        elif nd.sc.holds and len(near_zero) == 1:
            report.label = "3"
        elif len(vanishing) > 1:
            report.ties = vanishing
            report.reason = f"LICQ holds but multipliers of {[j + 1 for j in vanishing]} all vanish"
            return report
        elif len(near_zero) > 1:
            report.reason = f"LICQ holds but {len(near_zero)} reduced-Hessian eigenvalues vanish"
            return report
        else:
            report.reason = "LICQ holds but both SC and SOC fail"
            return report
        report.reason = _justify(report.label, nd)
        return report

    rank = licq.evidence["rank"]
    m = P.m
    full = np.column_stack([P.g_grad_x(x, y, J), P.g_grad_y(x, y, J)]) if J else np.zeros((0, m + 1))
    full_rank = numerical_rank(full, tol.rank)
    licq.evidence["full_gradient_rank"] = full_rank

    if rank == len(J) - 1 and rank < m and kkt.is_empty:
        report.label = "4"
    elif full_rank == len(J) == m + 1:
        if mfcq.holds:
            report.label = "5-2"
        elif not kkt.is_empty:
            report.label = "5-1"
        else:
            report.reason = "rank(grad g_J0) = m + 1 with MFCQ failing but no KKT multiplier"
            return report
    elif rank <= len(J) - 2:
        report.reason = f"LICQ rank deficit {len(J) - rank} >= 2 (non-generic)"
        return report
    else:
        report.reason = (f"LICQ fails (rank {rank} of {len(J)}) but neither the Type 4 "
                         f"nor the Type 5 rank pattern holds (full rank {full_rank})")
        return report
    report.reason = _justify(report.label, nd)
    return report


def branch_seed_at(P: BilevelProblem, x: float, y) -> Tuple[np.ndarray, np.ndarray, Tuple[int, ...]]:
    """(y, u, J0) of the Type-1 branch through a point"""
    y = check_point(P, y)
    J = active_set(P, x, y)
    u, _ = lagrange_multipliers(P, x, y, J)
    return y, u, J


def _branch_slope(P: BilevelProblem, x: float, branch) -> float:
    y, u, J = branch
    Dy, _ = implicit_derivatives(P, x, y, u, J)
    return float(P.f.grad_x(x, y) + P.f.grad_y(x, y) @ Dy)


def compute_alpha(P: BilevelProblem, x_bar: float, branch1, branch2) -> float:
    """
    alpha = d/dx [ f(x, y2(x)) - f(x, y1(x)) ] at x_bar

    Args:
        branch1, branch2: (y, u, J) of two Type-1 branches through x_bar

    Raises:
        SingularJacobianError: a branch derivative is unavailable
    """
    return _branch_slope(P, x_bar, branch2) - _branch_slope(P, x_bar, branch1)


def alpha_finite_difference(P: BilevelProblem, x_bar: float, branch1, branch2,
                            h: float = ALPHA_FD_STEP) -> float:
    """Central difference of the objective gap along Newton-corrected branch points"""
    def gap(x):
        values = []
        for y, u, J in (branch1, branch2):
            Dy, Du = implicit_derivatives(P, x_bar, y, u, J)
            result = newton_correct(P, x, y + Dy * (x - x_bar), (u + Du * (x - x_bar))[list(J)], J)
            if not result.converged:
                raise PreconditionError(f"Branch through y={np.round(y, 9).tolist()} not traceable at x={x}")
            values.append(P.f.value(x, result.y))
        return values[1] - values[0]

    return (gap(x_bar + h) - gap(x_bar - h)) / (2.0 * h)


def _order_members(members: List[np.ndarray], y_query: Optional[Sequence[float]]) -> List[np.ndarray]:
    if y_query is not None:
        q = np.asarray(y_query, dtype=float)
        return sorted(members, key=lambda y: float(np.linalg.norm(y - q)))
    return sorted(members, key=lambda y: tuple(y.tolist()))


def classify_simplicity(P: BilevelProblem, x_bar: float,
                        y_query: Optional[Sequence[float]] = None) -> ClassificationReport:
    """
    Classify the global solution set S(x_bar) as Case I, Case II or not simple

    Args:
        P: Problem with a declared search box
        x_bar: Upper-level point
        y_query: Optional point of interest; the member nearest to it is
            reported first (and replaces that member when they agree)

    Raises:
        GlobalSearchInconclusiveError: a minimizer lies on the box boundary
    """
    x_bar = float(x_bar)
    solution = solve_lower_global(P, x_bar)
    if y_query is not None:
        solution = snap_to_query(P, solution, y_query)
    if solution.inconclusive:
        raise GlobalSearchInconclusiveError(
            f"Lower-level minimum on the search-box boundary at x={x_bar}; enlarge the box"
        )
    if not solution.members:
        return ClassificationReport(x_bar, np.zeros(P.m), NOT_CLASSIFIABLE,
                                    "lower level infeasible in the search box", case=NOT_SIMPLE)

    members = _order_members([mem.y for mem in solution.members], y_query)
    reports = [classify_point(P, x_bar, y) for y in members]
    head = reports[0]
    result = ClassificationReport(
        x_bar, head.y, head.label, head.reason, head.active, head.nd, head.flags, head.fj, head.kkt,
        minimizers=members, member_reports=reports if len(reports) > 1 else [],
    )

    if len(members) == 1:
        if head.label in SIMPLE_TYPES:
            result.case = CASE_I
        else:
            result.case = NOT_SIMPLE
            result.reason = f"unique minimizer of type {head.label} is not admissible: {head.reason}"
        return result

    if len(members) > 2:
        result.case = NOT_SIMPLE
        result.reason = f"|S(x)| = {len(members)} > 2"
        return result

    labels = [r.label for r in reports]
    if labels != ["1", "1"]:
        result.case = NOT_SIMPLE
        result.reason = f"two minimizers of types {labels}; both must be Type 1"
        return result

    branch1 = branch_seed_at(P, x_bar, members[0])
    branch2 = branch_seed_at(P, x_bar, members[1])
    try:
        alpha = compute_alpha(P, x_bar, branch1, branch2)
    except SingularJacobianError as e:
        result.case = NOT_SIMPLE
        result.reason = f"branch derivative unavailable: {e}"
        return result
    result.alpha = alpha
    try:
        result.alpha_fd = alpha_finite_difference(P, x_bar, branch1, branch2)
    except PreconditionError as e:
        logger.warning(f"Finite-difference check of alpha skipped: {e}")
    if result.alpha_fd is not None and abs(alpha - result.alpha_fd) > 1e-5 * max(1.0, abs(alpha)):
        logger.warning(f"alpha = {alpha:.9g} disagrees with finite difference {result.alpha_fd:.9g}")

    if abs(alpha) > P.tol.res:
        result.case = CASE_II
        result.reason = f"two Type-1 minimizers with alpha = {alpha:.9g}"
    else:
        result.case = NOT_SIMPLE
        result.reason = f"two Type-1 minimizers but alpha = {alpha:.3e} vanishes"
    return result
