"""
Stationarity Checker

Optimality conditions for simple bilevel points, in two forms:

- direct: a certificate (w, xi) for the case's multiplier system, with
  mu and convex weights lambda for Case II, found by (bounded) least
  squares; verdict from the residual and the sign conditions
- implicit: branch derivatives D_x y and one-sided conditions on
  T = grad_x F + grad_y F . D_x y, signed by constraint drift or by alpha

The two forms are equivalent on simple points; cross_validate runs both
and flags disagreement. Also assembles the MPCC-LICQ matrix.

Cases: 1 (Type 1), 2 (Type 2), 3 (Type 4), 4 (Type 5-1), 5 (Type 5-2),
6 (Case II).
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.branch_system import fj_parameter_derivative, implicit_derivatives, newton_correct
from services.errors import (
    CaseNotIdentifiedError, DimensionError, PreconditionError,
    SingularJacobianError, UpperConstraintsError,
)
from services.exporter import jsonable
from services.linalg import bounded_least_squares, numerical_rank, singular_values
from services.problem_model import BilevelProblem, active_set, check_point
from services.type_classifier import CASE_I, CASE_II, ClassificationReport, branch_seed_at, classify_simplicity

logger = logging.getLogger(__name__)

SATISFIED = "satisfied"
VIOLATED = "violated"
INCONCLUSIVE = "inconclusive"
NOT_APPLICABLE = "not-applicable"

CASE_BY_TYPE = {"1": 1, "2": 2, "4": 3, "5-1": 4, "5-2": 5}
CASE_NAMES = {
    1: "Case I, Type 1",
    2: "Case I, Type 2",
    3: "Case I, Type 4",
    4: "Case I, Type 5-1",
    5: "Case I, Type 5-2",
    6: "Case II",
}

MU_GRID = np.logspace(-4, 4, 81)
DRIFT_FD_STEP = 1e-5


@dataclass
class MpccLicqReport:
    J: Tuple[int, ...]
    K: Tuple[int, ...]
    variant: str
    matrix: np.ndarray
    singular_values: np.ndarray
    rank: int
    full_column_rank: bool

    def to_dict(self) -> Dict:
        return {
            "variant": self.variant,
            "J": [j + 1 for j in self.J],
            "K": [k + 1 for k in self.K],
            "shape": list(self.matrix.shape),
            "matrix": self.matrix.tolist(),
            "singular_values": self.singular_values.tolist(),
            "rank": self.rank,
            "full_column_rank": self.full_column_rank,
        }


@dataclass
class StationarityReport:
    form: str
    case: Optional[int]
    verdict: str
    reason: str = ""
    certificate: Dict[str, Any] = field(default_factory=dict)
    residuals: Dict[str, float] = field(default_factory=dict)
    signs: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    details: Dict[str, Any] = field(default_factory=dict)

    @property
    def case_name(self) -> str:
        return CASE_NAMES.get(self.case, "none")

    def to_dict(self) -> Dict:
        return {
            "form": self.form,
            "case": self.case,
            "case_name": self.case_name,
            "verdict": self.verdict,
            "reason": self.reason,
            "certificate": jsonable(self.certificate),
            "residuals": self.residuals,
            "sign_conditions": jsonable(self.signs),
            "details": jsonable(self.details),
        }


@dataclass
class CrossValidation:
    direct: StationarityReport
    implicit: StationarityReport
    agreement: bool
    classification: Optional[ClassificationReport] = None

    def to_dict(self) -> Dict:
        out = {
            "agreement": self.agreement,
            "direct": self.direct.to_dict(),
            "implicit": self.implicit.to_dict(),
        }
        if self.classification is not None:
            out["classification"] = self.classification.to_dict()
        return out


# ---------------------------------------------------------------------------
# MPCC-LICQ
# ---------------------------------------------------------------------------

def mpcc_licq(P: BilevelProblem, x: float, y: Sequence[float], u: Sequence[float],
              u0: Optional[float] = None) -> MpccLicqReport:
    """
    MPCC-LICQ matrix of the combined program and its column rank

    Rows are indexed by (x, y, u_{K^c}) and, in the FJ variant, u0;
    columns by the stationarity equations, g_J and, in the FJ variant,
    the normalization and u0 = 0.

    Args:
        P: Problem
        x, y: Feasible point
        u: Multiplier of length p (KKT, or the u part of an FJ vector)
        u0: FJ normal multiplier; selects the FJ variant when given

    Raises:
        DimensionError: u has the wrong length
        PreconditionError: the multiplier does not satisfy its system
    """
    y = check_point(P, y)
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != P.p:
        raise DimensionError(f"multiplier has {u.size} components, expected p = {P.p}")
    tol = P.tol
    J = active_set(P, x, y)
    fj = u0 is not None
    weight = float(u0) if fj else 1.0

    stationarity = weight * P.f.grad_y(x, y) + (P.g_grad_y(x, y).T @ u if P.p else 0.0)
    residual = float(np.max(np.abs(stationarity), initial=0.0))
    inactive = [j for j in range(P.p) if j not in J and abs(u[j]) > tol.mult]
    if fj:
        residual = max(residual, abs(weight + float(np.sum(u)) - 1.0))
    if residual > tol.res or inactive:
        raise PreconditionError(
            f"multiplier does not satisfy the stationarity system (residual {residual:.3e}, "
            f"nonzero on inactive {[j + 1 for j in inactive]})"
        )

    m, k = P.m, len(J)
    K = tuple(j for j in range(P.p) if abs(u[j]) <= tol.mult)
    Kc = [j for j in J if j not in K]
    H = P.lagrangian_hessian(x, y, weight, u)
    Gx, Gy = P.g_grad_x(x, y, J), P.g_grad_y(x, y, J)

    rows = 1 + m + len(Kc) + (1 if fj else 0)
    cols = m + k + (2 if fj else 0)
    M = np.zeros((rows, cols))
    M[0, :m] = H[0, 1:]
    M[0, m:m + k] = Gx
    M[1:1 + m, :m] = H[1:, 1:]
    M[1:1 + m, m:m + k] = Gy.T.reshape(m, k)
    if Kc:
        M[1 + m:1 + m + len(Kc), :m] = P.g_grad_y(x, y, Kc)
    if fj:
        M[1 + m:1 + m + len(Kc), m + k] = 1.0
        M[-1, :m] = P.f.grad_y(x, y)
        M[-1, m + k + 1] = 1.0

    s = singular_values(M)
    rank = numerical_rank(M, tol.rank)
    report = MpccLicqReport(J, K, "fj" if fj else "kkt", M, s, rank, rank == cols)
    logger.debug(f"MPCC-LICQ matrix {M.shape}, rank {rank} of {cols}")
    return report


# ---------------------------------------------------------------------------
# Case identification
# ---------------------------------------------------------------------------

def identify_case(classification: ClassificationReport) -> int:
    """
    Raises:
        CaseNotIdentifiedError: the point is not simple
    """
    if classification.case == CASE_II:
        return 6
    if classification.case == CASE_I and classification.label in CASE_BY_TYPE:
        return CASE_BY_TYPE[classification.label]
    raise CaseNotIdentifiedError(
        f"point is not simple (type {classification.label}, case {classification.case}): {classification.reason}"
    )


def _prepare(P: BilevelProblem, x_bar: float, y_bar, classification: Optional[ClassificationReport]):
    if P.q > 0:
        raise UpperConstraintsError("optimality conditions are stated without upper-level constraints G")
    y_bar = check_point(P, y_bar)
    if classification is None:
        classification = classify_simplicity(P, x_bar, y_query=y_bar)
    case = identify_case(classification)
    return float(x_bar), y_bar, classification, case


def _other_minimizer(classification: ClassificationReport, y: np.ndarray) -> np.ndarray:
    """The Case II minimizer that is not the one nearest to y"""
    members = sorted(classification.minimizers, key=lambda yk: float(np.linalg.norm(yk - y)))
    if len(members) != 2:
        raise CaseNotIdentifiedError(f"Case II needs two minimizers, found {len(members)}")
    return members[1]


def _single_zero(P: BilevelProblem, vector: np.ndarray, J: Sequence[int]) -> int:
    zeros = [j for j in J if abs(vector[j]) <= P.tol.mult]
    if len(zeros) != 1:
        raise CaseNotIdentifiedError(f"expected exactly one vanishing multiplier, found {[j + 1 for j in zeros]}")
    return zeros[0]


# ---------------------------------------------------------------------------
# Direct form
# ---------------------------------------------------------------------------

@dataclass
class _LinearSystem:
    """Rows of A z = b with named blocks, unknowns bounded below/above"""
    names: List[str]
    A: np.ndarray
    b: np.ndarray
    blocks: Dict[str, Tuple[int, int]]
    lower: np.ndarray
    upper: np.ndarray

    def residuals(self, z: np.ndarray) -> Dict[str, float]:
        r = self.A @ z - self.b
        return {name: float(np.max(np.abs(r[lo:hi]), initial=0.0)) for name, (lo, hi) in self.blocks.items()}


def _stack(blocks: List[Tuple[str, np.ndarray, np.ndarray]], lower, upper, names) -> _LinearSystem:
    rows, rhs, spans, start = [], [], {}, 0
    for name, A, b in blocks:
        A = np.atleast_2d(A)
        if A.shape[0] == 0:
            continue
        rows.append(A)
        rhs.append(np.atleast_1d(b))
        spans[name] = (start, start + A.shape[0])
        start += A.shape[0]
    width = len(names)
    A = np.vstack(rows) if rows else np.zeros((0, width))
    b = np.concatenate(rhs) if rhs else np.zeros(0)
    return _LinearSystem(names, A, b, spans, np.asarray(lower, float), np.asarray(upper, float))


def _direct_system(P: BilevelProblem, x: float, y: np.ndarray, case: int, ctx: Dict,
                   mu: float = 0.0) -> _LinearSystem:
    """
    Certificate system for a case; unknowns are (w, xi_J, extras) with
    extras the slack of an inequality or the Case II weights
    """
    m = P.m
    J = ctx["J"]
    k = len(J)
    Fx, Fy = P.F.grad_x(x, y), P.F.grad_y(x, y)
    Gx, Gy = P.g_grad_x(x, y, J), P.g_grad_y(x, y, J).reshape(k, m)
    with_w = case not in (4, 5)
    nw = m if with_w else 0
    H = P.lagrangian_hessian(x, y, ctx["u0"], ctx["u"])

    extras: List[str] = []
    if case in (2, 3):
        extras = ["slack"]
    elif case == 6:
        extras = ["lambda1", "lambda2"]
    names = [f"w{i + 1}" for i in range(nw)] + [f"xi{j + 1}" for j in J] + extras
    n = len(names)
    lower, upper = np.full(n, -np.inf), np.full(n, np.inf)

    x_row = np.zeros((1, n))
    y_rows = np.zeros((m, n))
    if with_w:
        x_row[0, :m] = -H[0, 1:]
        y_rows[:, :m] = -H[1:, 1:]
    x_row[0, nw:nw + k] = Gx
    y_rows[:, nw:nw + k] = Gy.T
    bx, by = np.array([-Fx]), -Fy.copy()

    blocks = []
    if case == 6:
        # lambda columns carry mu times the value-function gradient terms
        for i, (yk, uk) in enumerate(ctx["branches"]):
            term = P.f.grad_x(x, y) - P.f.grad_x(x, yk)
            if P.p:
                term -= float(uk @ P.g_grad_x(x, yk))
            x_row[0, nw + k + i] = mu * term
        by = by - mu * P.f.grad_y(x, y)
        lower[nw + k:] = 0.0
    blocks.append(("x-stationarity", x_row, bx))
    blocks.append(("y-stationarity", y_rows, by))

    tangent = [j for j in J if case != 2 or j != ctx["q"]] if with_w else []
    if tangent:
        T = np.zeros((len(tangent), n))
        T[:, :m] = P.g_grad_y(x, y, tangent)
        blocks.append(("tangent", T, np.zeros(len(tangent))))

    if case == 2:
        q = ctx["q"]
        row = np.zeros((1, n))
        row[0, :m] = P.g[q].grad_y(x, y)
        row[0, -1] = 1.0
        blocks.append(("inequality", row, np.zeros(1)))
        lower[-1] = 0.0
        lower[nw + J.index(q)] = 0.0
    elif case == 3:
        row = np.zeros((1, n))
        row[0, :m] = P.f.grad_y(x, y)
        row[0, -1] = 1.0
        blocks.append(("inequality", row, np.zeros(1)))
        lower[-1] = 0.0
    elif case in (4, 5):
        for key in ("q", "r"):
            if key in ctx:
                lower[nw + J.index(ctx[key])] = 0.0
    elif case == 6:
        row = np.zeros((1, n))
        row[0, nw + k:] = 1.0
        blocks.append(("simplex", row, np.ones(1)))

    return _stack(blocks, lower, upper, names)


def _case_context(P: BilevelProblem, x: float, y: np.ndarray, case: int,
                  classification: ClassificationReport) -> Dict:
    J = list(active_set(P, x, y))
    ctx: Dict[str, Any] = {"J": J, "u0": 1.0}
    if case in (1, 2):
        _, u, _ = branch_seed_at(P, x, y)
        ctx["u"] = u
        if case == 2:
            ctx["q"] = _single_zero(P, u, J)
    elif case == 3:
        fj = classification.fj
        if fj is None or fj.kind != "singleton":
            raise CaseNotIdentifiedError("Type 4 point without a unique FJ multiplier")
        ctx["u0"] = float(fj.base[0])
        ctx["u"] = fj.base[1:].copy()
    elif case == 4:
        kkt = classification.kkt
        ctx["u"] = kkt.base.copy()
        ctx["q"] = _single_zero(P, kkt.base, J)
    elif case == 5:
        kkt = classification.kkt
        if len(kkt.vertices) != 2:
            raise CaseNotIdentifiedError(f"Type 5-2 point with KKT set of kind {kkt.kind}")
        ctx["u"] = kkt.vertices[0].copy()
        ctx["u2"] = kkt.vertices[1].copy()
        ctx["q"] = _single_zero(P, kkt.vertices[0], J)
        ctx["r"] = _single_zero(P, kkt.vertices[1], J)
    else:
        _, u, _ = branch_seed_at(P, x, y)
        ctx["u"] = u
        y2 = _other_minimizer(classification, y)
        _, u2, _ = branch_seed_at(P, x, y2)
        ctx["branches"] = [(y, u), (y2, u2)]
    return ctx


def _unpack(P: BilevelProblem, system: _LinearSystem, z: np.ndarray, J: Sequence[int]) -> Dict[str, Any]:
    values = dict(zip(system.names, z))
    xi = np.zeros(P.p)
    for j in J:
        xi[j] = values[f"xi{j + 1}"]
    w = np.array([values[f"w{i + 1}"] for i in range(P.m)]) if "w1" in values else np.zeros(P.m)
    out = {"w": w, "xi": xi}
    if "slack" in values:
        out["slack"] = values["slack"]
    return out


def _direct_signs(P: BilevelProblem, x: float, y: np.ndarray, case: int, ctx: Dict,
                  cert: Dict) -> Dict[str, Dict[str, Any]]:
    tol = P.tol.res
    w, xi = cert["w"], cert["xi"]
    signs: Dict[str, Dict[str, Any]] = {}
    if case == 2:
        q = ctx["q"]
        value = float(P.g[q].grad_y(x, y) @ w)
        signs[f"grad_y g{q + 1} . w <= 0"] = {"value": value, "ok": value <= tol}
        signs[f"xi{q + 1} >= 0"] = {"value": float(xi[q]), "ok": xi[q] >= -tol}
    elif case == 3:
        value = float(P.f.grad_y(x, y) @ w)
        signs["grad_y f . w <= 0"] = {"value": value, "ok": value <= tol}
    elif case in (4, 5):
        for key in ("q", "r"):
            if key in ctx:
                j = ctx[key]
                signs[f"xi{j + 1} >= 0"] = {"value": float(xi[j]), "ok": xi[j] >= -tol}
    elif case == 6:
        lam = np.asarray(cert["lambda"])
        signs["mu > 0"] = {"value": cert["mu"], "ok": cert["mu"] > 0}
        signs["lambda >= 0"] = {"value": lam.tolist(), "ok": bool(np.all(lam >= -tol))}
    return signs


def check_optimality_direct(P: BilevelProblem, x_bar: float, y_bar: Sequence[float],
                            classification: Optional[ClassificationReport] = None) -> StationarityReport:
    """
    Certificate form of the optimality conditions at a simple point

    Args:
        P: Problem without upper-level constraints
        x_bar, y_bar: Candidate bilevel solution
        classification: Result of classify_simplicity at (x_bar, y_bar);
            computed when omitted

    Returns:
        StationarityReport with the certificate, per-block residuals and
        sign outcomes; satisfied iff every residual <= tau_res and every
        sign condition holds

    Raises:
        UpperConstraintsError: the problem has G constraints
        CaseNotIdentifiedError: the point is not simple
    """
    x_bar, y_bar, classification, case = _prepare(P, x_bar, y_bar, classification)
    ctx = _case_context(P, x_bar, y_bar, case, classification)
    J = ctx["J"]

    if case == 6:
        best = None
        for mu in MU_GRID:
            system = _direct_system(P, x_bar, y_bar, case, ctx, mu=float(mu))
            z, residual = bounded_least_squares(system.A, system.b, system.lower, system.upper)
            if best is None or residual < best[2] - 1e-15:
                best = (float(mu), system, residual, z)
            if residual <= P.tol.res:
                best = (float(mu), system, residual, z)
                break
        mu, system, _, z = best
        cert = _unpack(P, system, z, J)
        cert["mu"] = mu
        cert["lambda"] = z[-2:]
    else:
        system = _direct_system(P, x_bar, y_bar, case, ctx)
        z, _ = bounded_least_squares(system.A, system.b, system.lower, system.upper)
        cert = _unpack(P, system, z, J)

    residuals = system.residuals(z)
    signs = _direct_signs(P, x_bar, y_bar, case, ctx, cert)
    ok = max(residuals.values(), default=0.0) <= P.tol.res and all(s["ok"] for s in signs.values())
    details = {"J0": [j + 1 for j in J], "multiplier": ctx["u"]}
    if case == 3:
        details["u0"] = ctx["u0"]
    for key in ("q", "r"):
        if key in ctx:
            details[key] = ctx[key] + 1
    if case == 5:
        details["multiplier2"] = ctx["u2"]

    report = StationarityReport(
        form="direct",
        case=case,
        verdict=SATISFIED if ok else VIOLATED,
        reason=f"{CASE_NAMES[case]}: max residual {max(residuals.values(), default=0.0):.3e}",
        certificate=cert,
        residuals=residuals,
        signs=signs,
        details=details,
    )
    logger.info(f"Direct check at x={x_bar}: {report.case_name} -> {report.verdict}")
    return report


def resubstitute_certificate(P: BilevelProblem, x_bar: float, y_bar: Sequence[float],
                             report: StationarityReport,
                             classification: Optional[ClassificationReport] = None) -> float:
    """
    Max-abs residual of a direct certificate, re-evaluated from scratch

    Rebuilds the case system from the problem data and plugs in the
    reported (w, xi, slack, mu, lambda).
    """
    x_bar, y_bar, classification, case = _prepare(P, x_bar, y_bar, classification)
    if report.case != case:
        raise CaseNotIdentifiedError(f"certificate is for case {report.case}, point is case {case}")
    ctx = _case_context(P, x_bar, y_bar, case, classification)
    cert = report.certificate
    system = _direct_system(P, x_bar, y_bar, case, ctx, mu=float(cert.get("mu", 0.0)))
    w, xi = np.asarray(cert["w"], float), np.asarray(cert["xi"], float)
    values = {f"w{i + 1}": w[i] for i in range(P.m)}
    values.update({f"xi{j + 1}": xi[j] for j in range(P.p)})
    if "slack" in cert:
        values["slack"] = cert["slack"]
    if "lambda" in cert:
        values["lambda1"], values["lambda2"] = cert["lambda"]
    z = np.array([values[name] for name in system.names])
    return max(system.residuals(z).values(), default=0.0)


# ---------------------------------------------------------------------------
# Implicit form
# ---------------------------------------------------------------------------

def _slope(P: BilevelProblem, x: float, y: np.ndarray, Dy: np.ndarray) -> float:
    """T = grad_x F + grad_y F . D_x y"""
    return float(P.F.grad_x(x, y) + P.F.grad_y(x, y) @ Dy)


def _drift(P: BilevelProblem, x: float, y: np.ndarray, u: np.ndarray, J: Sequence[int],
           q: int) -> Dict[str, Any]:
    """
    d/dx g_q(x, y(x)) along the branch of J, with a central-difference check

    Returns:
        Dict with gamma, gamma_fd (None if the corrector failed), Dy and
        consistent (False when the two disagree in sign)
    """
    Dy, Du = implicit_derivatives(P, x, y, u, J)
    gamma = float(P.g[q].grad_x(x, y) + P.g[q].grad_y(x, y) @ Dy)

    values = []
    for h in (DRIFT_FD_STEP, -DRIFT_FD_STEP):
        guess_u = (u + Du * h)[list(J)] if J else np.zeros(0)
        result = newton_correct(P, x + h, y + Dy * h, guess_u, J)
        if not result.converged:
            values = []
            break
        values.append(P.g[q].value(x + h, result.y))
    gamma_fd = (values[0] - values[1]) / (2 * DRIFT_FD_STEP) if values else None
    consistent = gamma_fd is None or abs(gamma_fd) <= P.tol.res or np.sign(gamma_fd) == np.sign(gamma)
    return {"gamma": gamma, "gamma_fd": gamma_fd, "Dy": Dy, "consistent": bool(consistent)}


def _one_sided(value: float, sign: int, tol: float) -> bool:
    """value >= 0 for sign > 0, value <= 0 for sign < 0"""
    return value >= -tol if sign > 0 else value <= tol


def check_optimality_implicit(P: BilevelProblem, x_bar: float, y_bar: Sequence[float],
                              classification: Optional[ClassificationReport] = None) -> StationarityReport:
    """
    Branch-derivative form of the optimality conditions at a simple point

    Raises:
        UpperConstraintsError: the problem has G constraints
        CaseNotIdentifiedError: the point is not simple
        SingularJacobianError: a required branch Jacobian is singular
    """
    x_bar, y_bar, classification, case = _prepare(P, x_bar, y_bar, classification)
    ctx = _case_context(P, x_bar, y_bar, case, classification)
    tol = P.tol.res
    J = ctx["J"]
    signs: Dict[str, Dict[str, Any]] = {}
    details: Dict[str, Any] = {"J0": [j + 1 for j in J]}
    verdict, reason = None, ""

    if case == 1:
        Dy, _ = implicit_derivatives(P, x_bar, y_bar, ctx["u"], J)
        T = _slope(P, x_bar, y_bar, Dy)
        details.update(Dy=Dy, T=T)
        signs["T = 0"] = {"value": T, "ok": abs(T) <= tol}

    elif case == 2:
        q = ctx["q"]
        J_tilde = [j for j in J if j != q]
        drift = _drift(P, x_bar, y_bar, ctx["u"], J_tilde, q)
        Dy_hat, _ = implicit_derivatives(P, x_bar, y_bar, ctx["u"], J)
        T_tilde, T_hat = _slope(P, x_bar, y_bar, drift["Dy"]), _slope(P, x_bar, y_bar, Dy_hat)
        details.update(q=q + 1, gamma_q=drift["gamma"], gamma_q_fd=drift["gamma_fd"],
                       Dy_tilde=drift["Dy"], Dy_hat=Dy_hat, T_tilde=T_tilde, T_hat=T_hat)
        if abs(drift["gamma"]) < tol or not drift["consistent"]:
            verdict, reason = INCONCLUSIVE, "inconclusive (non-generic drift of the omitted constraint)"
        else:
            s = 1 if drift["gamma"] > 0 else -1
            signs["T along branch without q"] = {"value": T_tilde, "ok": _one_sided(T_tilde, -s, tol)}
            signs["T along branch with q"] = {"value": T_hat, "ok": _one_sided(T_hat, s, tol)}

    elif case == 3:
        J_list = list(J)
        dx, dy, du = fj_parameter_derivative(P, x_bar, y_bar, ctx["u0"], ctx["u"][J_list], J_list)
        value = float(P.F.grad_x(x_bar, y_bar) * dx + P.F.grad_y(x_bar, y_bar) @ dy)
        details.update(dx_du0=dx, dy_du0=dy, du_du0=du, dF_du0=value)
        signs["dF/du0 >= 0"] = {"value": value, "ok": value >= -tol}

    elif case in (4, 5):
        pairs = [("q", ctx["u"])] + ([("r", ctx["u2"])] if case == 5 else [])
        for key, u in pairs:
            j = ctx[key]
            J_branch = [i for i in J if i != j]
            drift = _drift(P, x_bar, y_bar, u, J_branch, j)
            T = _slope(P, x_bar, y_bar, drift["Dy"])
            details.update({key: j + 1, f"gamma_{key}": drift["gamma"], f"gamma_{key}_fd": drift["gamma_fd"],
                            f"Dy_{key}": drift["Dy"], f"T_{key}": T})
            if abs(drift["gamma"]) < tol or not drift["consistent"]:
                verdict, reason = INCONCLUSIVE, f"inconclusive (non-generic drift of g{j + 1})"
                break
            # the branch without g_j stays feasible on the side where g_j decreases
            s = -1 if drift["gamma"] > 0 else 1
            signs[f"T along branch without g{j + 1}"] = {"value": T, "ok": _one_sided(T, s, tol)}
        if case == 5 and verdict is None and np.sign(details["gamma_q"]) == np.sign(details["gamma_r"]):
            verdict, reason = INCONCLUSIVE, "inconclusive (drifts of q and r share a sign)"

    else:
        (y1, u1), (y2, _) = ctx["branches"]
        _, u2, J2 = branch_seed_at(P, x_bar, y2)
        Dy1, _ = implicit_derivatives(P, x_bar, y1, u1, J)
        Dy2, _ = implicit_derivatives(P, x_bar, y2, u2, J2)
        alpha = (float(P.f.grad_x(x_bar, y2) + P.f.grad_y(x_bar, y2) @ Dy2)
                 - float(P.f.grad_x(x_bar, y1) + P.f.grad_y(x_bar, y1) @ Dy1))
        T = _slope(P, x_bar, y1, Dy1)
        details.update(alpha=alpha, Dy1=Dy1, Dy2=Dy2, T=T)
        if abs(alpha) < tol:
            verdict, reason = INCONCLUSIVE, "inconclusive (alpha vanishes)"
        else:
            s = 1 if alpha > 0 else -1
            signs["T along first minimizer branch"] = {"value": T, "ok": _one_sided(T, s, tol)}

    if verdict is None:
        ok = all(sgn["ok"] for sgn in signs.values())
        verdict = SATISFIED if ok else VIOLATED
        reason = f"{CASE_NAMES[case]}: " + ", ".join(f"{k} = {v['value']:.6g}" for k, v in signs.items())

    report = StationarityReport(form="implicit", case=case, verdict=verdict, reason=reason,
                                signs=signs, details=details)
    logger.info(f"Implicit check at x={x_bar}: {report.case_name} -> {report.verdict}")
    return report


# ---------------------------------------------------------------------------
# Cross-validation and the unconstrained corollary
# ---------------------------------------------------------------------------

def verdicts_agree(direct: StationarityReport, implicit: StationarityReport) -> bool:
    return direct.verdict == implicit.verdict


def cross_validate(P: BilevelProblem, x_bar: float, y_bar: Sequence[float],
                   direct: Optional[StationarityReport] = None,
                   implicit: Optional[StationarityReport] = None,
                   classification: Optional[ClassificationReport] = None) -> CrossValidation:
    """
    Run both checks (unless given) and compare verdicts

    Non-simple points report not-applicable on both forms.
    """
    y_bar = check_point(P, y_bar)
    if classification is None:
        classification = classify_simplicity(P, x_bar, y_query=y_bar)
    try:
        if direct is None:
            direct = check_optimality_direct(P, x_bar, y_bar, classification)
        if implicit is None:
            implicit = check_optimality_implicit(P, x_bar, y_bar, classification)
    except CaseNotIdentifiedError as e:
        direct = direct or StationarityReport("direct", None, NOT_APPLICABLE, str(e))
        implicit = implicit or StationarityReport("implicit", None, NOT_APPLICABLE, str(e))
    except SingularJacobianError as e:
        implicit = StationarityReport("implicit", direct.case if direct else None, INCONCLUSIVE, str(e))
        if direct is None:
            direct = StationarityReport("direct", None, INCONCLUSIVE, str(e))

    agreement = verdicts_agree(direct, implicit)
    if not agreement:
        logger.error(
            f"Direct and implicit verdicts disagree at x={x_bar}, y={y_bar.tolist()}: "
            f"direct {direct.verdict} ({direct.reason}); implicit {implicit.verdict} ({implicit.reason})"
        )
    return CrossValidation(direct, implicit, agreement, classification)


def check_unconstrained_corollary(P: BilevelProblem, x_bar: float, y_bar: Sequence[float],
                                  classification: Optional[ClassificationReport] = None) -> StationarityReport:
    """
    Optimality condition for problems without constraints at either level

        0 = grad_x F + mu (grad_x f(x, y) - grad_x f(x, y2)) + grad2_yx f . w
        0 = grad_y F + grad2_yy f . w

    with mu = 0 in Case I (Type 1) and mu >= 0 in Case II, y2 the other
    minimizer. Case II points are exactly the f-critical ones.

    Raises:
        PreconditionError: the problem has constraints
    """
    if P.p or P.q:
        raise PreconditionError("the unconstrained condition needs p = q = 0")
    x_bar, y_bar, classification, case = _prepare(P, x_bar, y_bar, classification)
    m = P.m
    H = P.f.hess(x_bar, y_bar)
    A = np.zeros((1 + m, m + 1))
    A[0, :m] = H[0, 1:]
    A[1:, :m] = H[1:, 1:]
    b = -np.concatenate([[P.F.grad_x(x_bar, y_bar)], P.F.grad_y(x_bar, y_bar)])
    lower, upper = np.full(m + 1, -np.inf), np.full(m + 1, np.inf)
    lower[m] = 0.0
    if case == 6:
        y2 = _other_minimizer(classification, y_bar)
        A[0, m] = P.f.grad_x(x_bar, y_bar) - P.f.grad_x(x_bar, y2)
    else:
        upper[m] = 0.0
    z, residual = bounded_least_squares(A, b, lower, upper)
    verdict = SATISFIED if residual <= P.tol.res else VIOLATED
    return StationarityReport(
        form="unconstrained",
        case=case,
        verdict=verdict,
        reason=f"{CASE_NAMES[case]}: residual {residual:.3e}",
        certificate={"w": z[:m], "mu": float(z[m])},
        residuals={"stationarity": residual},
        details={"f_critical": case == 6},
    )
