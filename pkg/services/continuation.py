"""
Continuation Service

Traces stationary branches of the lower-level problem along x with an
Euler predictor and damped Newton corrector, locates the events where
a branch stops being nondegenerate, and assembles the global solution
map S(x), V(x) over an x-grid.

Events (each located by bisection in x):
- multiplier-zero: an active multiplier reaches 0
- eigenvalue-zero: an eigenvalue of the reduced Hessian reaches 0
- constraint-activation: an inactive constraint reaches 0
- licq-loss: the system Jacobian condition number exceeds 1/tau_rank
- box-exit: y leaves the search box
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from services.branch_system import (
    implicit_derivatives, jacobian_condition, kkt_jacobian, kkt_residual,
    newton_correct, reduced_hessian,
)
from services.errors import (
    CorrectorDivergenceError, ExprDomainError, PreconditionError, SingularJacobianError,
)
from services.lower_level import LowerSolution, solve_lower_global, value_function
from services.problem_model import BilevelProblem

logger = logging.getLogger(__name__)

MULTIPLIER_ZERO = "multiplier-zero"
EIGENVALUE_ZERO = "eigenvalue-zero"
CONSTRAINT_ACTIVATION = "constraint-activation"
LICQ_LOSS = "licq-loss"
BOX_EXIT = "box-exit"

EVENT_LOCATION_TOL = 1e-8


@dataclass
class BranchSeed:
    """Starting point (x, y, u, J) of a branch; u has length p"""
    x: float
    y: np.ndarray
    u: np.ndarray
    J: Tuple[int, ...]


@dataclass
class BranchSample:
    x: float
    y: np.ndarray
    u: np.ndarray
    active: Tuple[int, ...]
    label: str
    event: Optional[str] = None


@dataclass
class BranchEvent:
    x: float
    kind: str
    index: Optional[int] = None

    def to_dict(self) -> Dict:
        return {"x": self.x, "kind": self.kind, "index": None if self.index is None else self.index + 1}


@dataclass
class CurveSegment:
    """Samples of one branch, ordered by x, with the events that ended it"""
    J: Tuple[int, ...]
    samples: List[BranchSample] = field(default_factory=list)
    events: List[BranchEvent] = field(default_factory=list)

    @property
    def xs(self) -> np.ndarray:
        return np.array([s.x for s in self.samples])

    @property
    def ys(self) -> np.ndarray:
        return np.array([s.y for s in self.samples])

    def to_frame(self, m: int, p: int) -> pd.DataFrame:
        rows = []
        for s in self.samples:
            row = {"x": s.x}
            row.update({f"y{k + 1}": s.y[k] for k in range(m)})
            row.update({f"u{j + 1}": s.u[j] for j in range(p)})
            row["active_mask"] = active_mask(s.active)
            row["type_label"] = s.label
            row["event"] = s.event or ""
            rows.append(row)
        columns = ["x"] + [f"y{k + 1}" for k in range(m)] + [f"u{j + 1}" for j in range(p)]
        columns += ["active_mask", "type_label", "event"]
        return pd.DataFrame(rows, columns=columns)

    def to_dict(self) -> Dict:
        return {
            "active_set": [j + 1 for j in self.J],
            "samples": len(self.samples),
            "x_range": [float(self.xs.min()), float(self.xs.max())] if self.samples else None,
            "events": [e.to_dict() for e in self.events],
        }


def active_mask(active: Sequence[int]) -> int:
    """Bit j-1 set for each active constraint g_j"""
    return sum(1 << j for j in active)


# Event functions: each returns named scalars whose sign change marks an event

def _event_values(P: BilevelProblem, x: float, y: np.ndarray, u_J: np.ndarray,
                  J: Sequence[int]) -> Dict[Tuple[str, Optional[int]], float]:
    tol = P.tol
    values: Dict[Tuple[str, Optional[int]], float] = {}
    for uj, j in zip(u_J, J):
        values[(MULTIPLIER_ZERO, j)] = float(uj)
    u = np.zeros(P.p)
    u[list(J)] = u_J
    R, _ = reduced_hessian(P, x, y, u, J)
    if R.size:
        for k, lam in enumerate(np.linalg.eigvalsh(R)):
            values[(EIGENVALUE_ZERO, k)] = float(lam)
    g = P.g_values(x, y)
    for j in range(P.p):
        if j not in J:
            values[(CONSTRAINT_ACTIVATION, j)] = -(float(g[j]) + tol.act)
    K, _ = kkt_jacobian(P, x, y, u_J, J)
    values[(LICQ_LOSS, None)] = float(np.log(1.0 / tol.rank) - np.log(jacobian_condition(K)))
    lo, hi = P.box.y_lower, P.box.y_upper
    values[(BOX_EXIT, None)] = float(np.min(np.minimum(y - lo, hi - y)))
    return values


def _crossed(before: Dict, after: Dict) -> List[Tuple[str, Optional[int]]]:
    crossed = []
    for key, a in after.items():
        b = before.get(key)
        if b is None:
            continue
        if b > 0 >= a or b < 0 <= a:
            if key[0] in (MULTIPLIER_ZERO, EIGENVALUE_ZERO) or b > 0:
                crossed.append(key)
    return crossed


def _sample_label(P: BilevelProblem, x: float, y: np.ndarray, u_J: np.ndarray, J: Sequence[int]) -> str:
    tol = P.tol
    if any(abs(uj) <= tol.mult for uj in u_J):
        return "2"
    u = np.zeros(P.p)
    u[list(J)] = u_J
    R, _ = reduced_hessian(P, x, y, u, J)
    if R.size and np.min(np.abs(np.linalg.eigvalsh(R))) <= tol.eig:
        return "3"
    return "1"


def _step_to(P: BilevelProblem, x0: float, y0: np.ndarray, u0: np.ndarray,
             J: Sequence[int], x1: float):
    """Euler predictor from (x0, y0, u0) followed by Newton at x1"""
    try:
        Dy, Du = implicit_derivatives(P, x0, y0, u0, J)
        dx = x1 - x0
        y_pred, u_pred = y0 + Dy * dx, u0 + Du[list(J)] * dx
    except (SingularJacobianError, ExprDomainError):
        y_pred, u_pred = y0, u0
    return newton_correct(P, x1, y_pred, u_pred, J)


def _locate(P: BilevelProblem, J: Sequence[int], a: Tuple, b: Tuple,
            key: Tuple[str, Optional[int]], sign_a: float):
    """Bisect between accepted states a and b until the bracket is below tolerance"""
    xa, ya, ua = a
    xb, yb, ub = b
    while abs(xb - xa) > EVENT_LOCATION_TOL:
        xm = 0.5 * (xa + xb)
        result = _step_to(P, xa, ya, ua, J, xm)
        if not result.converged:
            xb, yb, ub = xm, yb, ub
            continue
        try:
            value = _event_values(P, xm, result.y, result.u, J).get(key, sign_a)
        except ExprDomainError:
            value = -sign_a
        if np.sign(value) == np.sign(sign_a) and value != 0:
            xa, ya, ua = xm, result.y, result.u
        else:
            xb, yb, ub = xm, result.y, result.u
    return xa, ya, ua


def _trace_one_way(P: BilevelProblem, seed: BranchSeed, bound: float, step: float,
                   direction: int, segment: CurveSegment) -> List[BranchSample]:
    J = tuple(seed.J)
    x, y, u_J = float(seed.x), np.asarray(seed.y, dtype=float), np.asarray(seed.u, dtype=float)[list(J)]
    samples: List[BranchSample] = []
    h = step
    floor = max(step * 1e-6, 1e-12)
    before = _event_values(P, x, y, u_J, J)
    while direction * (bound - x) > 1e-14:
        x_next = x + direction * h
        if direction * (x_next - bound) > 0:
            x_next = bound
        result = _step_to(P, x, y, u_J, J, x_next)
        if not result.converged:
            h *= 0.5
            if h < floor:
                last = samples[-1] if samples else None
                raise CorrectorDivergenceError(
                    f"Corrector failed near x={x_next:.6g} with step below {floor:.1e}", last_sample=last,
                )
            continue
        try:
            after = _event_values(P, x_next, result.y, result.u, J)
        except ExprDomainError:
            h *= 0.5
            continue
        crossed = _crossed(before, after)
        if crossed:
            best = None
            for key in crossed:
                xa, ya, ua = _locate(P, J, (x, y, u_J), (x_next, result.y, result.u), key, before[key])
                if best is None or direction * (xa - best[0]) < 0:
                    best = (xa, ya, ua, key)
            xa, ya, ua, key = best
            kind, index = key
            segment.events.append(BranchEvent(xa, kind, index if kind != EIGENVALUE_ZERO else None))
            label = {MULTIPLIER_ZERO: "2", EIGENVALUE_ZERO: "3"}.get(kind, "not-classifiable")
            u_full = np.zeros(P.p)
            u_full[list(J)] = ua
            samples.append(BranchSample(xa, ya, u_full, J, label, kind))
            logger.info(f"Branch J={[j + 1 for j in J]}: {kind} event at x={xa:.9g}")
            return samples
        x, y, u_J, before = x_next, result.y, result.u, after
        u_full = np.zeros(P.p)
        u_full[list(J)] = u_J
        samples.append(BranchSample(x, y, u_full, J, _sample_label(P, x, y, u_J, J)))
        h = min(step, 2.0 * h)
    return samples


def trace_branch(P: BilevelProblem, seed: BranchSeed, x_range: Tuple[float, float],
                 step: float, direction: Optional[int] = None) -> CurveSegment:
    """
    Trace the branch of the active-set system through a seed

    Args:
        P: Problem
        seed: Point (x, y, u, J) satisfying the active-set system
        x_range: Interval to trace within
        step: Nominal x-step; halved on corrector failure, regrown after
        direction: +1 or -1 for one side only, None for both sides

    Returns:
        CurveSegment with samples sorted by x and the events met

    Raises:
        PreconditionError: seed residual above tau_res
        SingularJacobianError: seed Jacobian singular
        CorrectorDivergenceError: corrector fails with step at the floor
    """
    if step <= 0:
        raise PreconditionError("Step must be positive")
    lo, hi = min(x_range), max(x_range)
    J = tuple(sorted(seed.J))
    y = np.asarray(seed.y, dtype=float)
    u = np.zeros(P.p)
    given = np.asarray(seed.u, dtype=float)
    if given.size == P.p:
        u[:] = given
    else:
        u[list(J)] = given
    seed = BranchSeed(float(seed.x), y, u, J)
    residual = float(np.max(np.abs(kkt_residual(P, seed.x, y, u[list(J)], J)), initial=0.0))
    if residual > P.tol.res:
        raise PreconditionError(f"Seed residual {residual:.3e} exceeds tau_res = {P.tol.res:.1e}")
    implicit_derivatives(P, seed.x, y, u, J)

    segment = CurveSegment(J)
    start = BranchSample(seed.x, y, u, J, _sample_label(P, seed.x, y, u[list(J)], J))
    down: List[BranchSample] = []
    up: List[BranchSample] = []
    if direction in (None, -1) and seed.x > lo:
        down = _trace_one_way(P, seed, lo, step, -1, segment)
    if direction in (None, 1) and seed.x < hi:
        up = _trace_one_way(P, seed, hi, step, 1, segment)
    segment.samples = list(reversed(down)) + [start] + up
    logger.info(f"Traced branch J={[j + 1 for j in J]}: {len(segment.samples)} samples, {len(segment.events)} events")
    return segment


@dataclass
class SolutionMapEntry:
    x: float
    solution: LowerSolution
    branches: List[int]
    labels: List[str]


@dataclass
class SolutionMap:
    """S(x) and V(x) over an x-grid with branch attribution of members"""
    entries: List[SolutionMapEntry] = field(default_factory=list)

    @property
    def xs(self) -> np.ndarray:
        return np.array([e.x for e in self.entries])

    @property
    def values(self) -> np.ndarray:
        return np.array([e.solution.value for e in self.entries])

    def points(self, branch: Optional[int] = None) -> np.ndarray:
        """Rows (x, y) of every member, optionally of one branch"""
        rows = []
        for e in self.entries:
            for mem, b in zip(e.solution.members, e.branches):
                if branch is None or b == branch:
                    rows.append(np.r_[e.x, mem.y])
        return np.array(rows) if rows else np.zeros((0, 0))

    def branch_ids(self) -> List[int]:
        return sorted({b for e in self.entries for b in e.branches})

    def to_frame(self, m: int, p: int) -> pd.DataFrame:
        rows = []
        for e in self.entries:
            for mem, b, label in zip(e.solution.members, e.branches, e.labels):
                row = {"x": e.x}
                row.update({f"y{k + 1}": mem.y[k] for k in range(m)})
                u = mem.u if mem.u is not None else np.full(p, np.nan)
                row.update({f"u{j + 1}": u[j] for j in range(p)})
                row["active_mask"] = active_mask(mem.active)
                row["type_label"] = label
                row["event"] = "inconclusive" if e.solution.inconclusive else ""
                row["value"] = mem.value
                row["branch"] = b
                rows.append(row)
        columns = ["x"] + [f"y{k + 1}" for k in range(m)] + [f"u{j + 1}" for j in range(p)]
        columns += ["active_mask", "type_label", "event", "value", "branch"]
        return pd.DataFrame(rows, columns=columns)


def solution_map(P: BilevelProblem, xs: Sequence[float], classify: bool = False,
                 progress: Optional[Callable[[int, int], None]] = None) -> SolutionMap:
    """
    Global solution map over an x-grid

    Members at consecutive grid points are linked into branches when
    their active sets agree and they lie within a few grid steps of
    each other in y.

    Args:
        P: Problem
        xs: Increasing x-grid
        classify: Attach the type label of every member
        progress: Optional callback(done, total)
    """
    from services.type_classifier import classify_point

    result = SolutionMap()
    next_branch = 0
    previous: List[Tuple[np.ndarray, Tuple[int, ...], int]] = []
    xs = [float(x) for x in xs]
    for i, x in enumerate(xs):
        solution = solve_lower_global(P, x)
        branches, labels, current = [], [], []
        dx = abs(x - xs[i - 1]) if i else 0.0
        span = float(np.max(P.box.y_upper - P.box.y_lower))
        reach = max(0.05 * span, 20.0 * dx)
        for mem in solution.members:
            match = None
            for y_prev, active_prev, b in previous:
                if b in branches:
                    continue
                if active_prev == mem.active and np.linalg.norm(mem.y - y_prev) <= reach:
                    match = b
                    break
            if match is None:
                match = next_branch
                next_branch += 1
            branches.append(match)
            current.append((mem.y, mem.active, match))
            label = ""
            if classify:
                label = classify_point(P, x, mem.y).label
            labels.append(label)
        previous = current
        result.entries.append(SolutionMapEntry(x, solution, branches, labels))
        if progress:
            progress(i + 1, len(xs))
    return result


__all__ = [
    "BranchEvent",
    "BranchSample",
    "BranchSeed",
    "CurveSegment",
    "SolutionMap",
    "implicit_derivatives",
    "solution_map",
    "solve_lower_global",
    "trace_branch",
    "value_function",
]
