"""
Global Lower-Level Solve

S(x) and V(x) by dense grid scan over the search box, multistart SLSQP
from the best separated grid points, and Newton polishing on the
active-set systems. Members within tau_res of the best value are all
kept so exact ties (two global minimizers) are reported.
"""

import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from services.branch_system import (
    fj_polish, jacobian_condition, kkt_jacobian, newton_correct,
)
from services.errors import ExprDomainError
from services.problem_model import BilevelProblem

logger = logging.getLogger(__name__)

MAX_GRID_POINTS = 250_000
NEAR_ACTIVE = 1e-6


@dataclass
class LowerMember:
    """One global minimizer of the lower-level problem"""
    y: np.ndarray
    value: float
    active: Tuple[int, ...]
    u: Optional[np.ndarray] = None
    u0: Optional[float] = None
    method: str = "slsqp"

    def to_dict(self) -> dict:
        return {
            "y": self.y.tolist(),
            "value": self.value,
            "active": [j + 1 for j in self.active],
            "u": None if self.u is None else self.u.tolist(),
            "u0": self.u0,
            "method": self.method,
        }


@dataclass
class LowerSolution:
    x: float
    members: List[LowerMember] = field(default_factory=list)
    value: float = float("inf")
    inconclusive: bool = False
    grid_points: int = 0
    feasible_points: int = 0

    @property
    def feasible(self) -> bool:
        return bool(self.members)

    @property
    def points(self) -> np.ndarray:
        if not self.members:
            return np.zeros((0, 0))
        return np.array([mem.y for mem in self.members])

    def nearest(self, y: Sequence[float]) -> Tuple[Optional[LowerMember], float]:
        if not self.members:
            return None, float("inf")
        y = np.asarray(y, dtype=float)
        dists = [float(np.linalg.norm(mem.y - y)) for mem in self.members]
        k = int(np.argmin(dists))
        return self.members[k], dists[k]

    def to_dict(self) -> dict:
        return {
            "x": self.x,
            "value": self.value if self.feasible else None,
            "members": [mem.to_dict() for mem in self.members],
            "inconclusive": self.inconclusive,
            "grid_points": self.grid_points,
            "feasible_points": self.feasible_points,
        }


def grid_axes(P: BilevelProblem) -> List[np.ndarray]:
    """Per-axis grid, odd point counts so box midpoints are included"""
    per_axis = min(P.tol.grid, int(MAX_GRID_POINTS ** (1.0 / P.m)))
    per_axis = max(per_axis | 1, 9)
    return [np.linspace(lo, hi, per_axis) for lo, hi in P.box.y]


def grid_points(P: BilevelProblem) -> Tuple[np.ndarray, np.ndarray]:
    axes = grid_axes(P)
    mesh = np.meshgrid(*axes, indexing="ij")
    Y = np.column_stack([a.reshape(-1) for a in mesh])
    cell = np.array([a[1] - a[0] for a in axes])
    return Y, cell


def max_violation(P: BilevelProblem, x: float, Y: np.ndarray) -> np.ndarray:
    if P.p == 0:
        return np.full(Y.shape[0], -np.inf)
    G = np.column_stack([gj.values(x, Y) for gj in P.g])
    G = np.where(np.isnan(G), np.inf, G)
    return G.max(axis=1)


def select_seeds(Y: np.ndarray, scores: np.ndarray, count: int, separation: np.ndarray) -> List[np.ndarray]:
    """Best-scoring points, greedily kept at least `separation` apart in every axis"""
    order = np.argsort(scores)
    order = order[np.isfinite(scores[order])][: max(50 * count, count)]
    seeds: List[np.ndarray] = []
    for idx in order:
        y = Y[idx]
        if all(np.any(np.abs(y - s) > separation) for s in seeds):
            seeds.append(y)
            if len(seeds) >= count:
                break
    return seeds


def _slsqp(P: BilevelProblem, x: float, y0: np.ndarray) -> Optional[np.ndarray]:
    def fun(y):
        return P.f.value(x, y)

    def jac(y):
        return P.f.grad_y(x, y)

    constraints = [
        {"type": "ineq", "fun": (lambda y, g=gj: -g.value(x, y)), "jac": (lambda y, g=gj: -g.grad_y(x, y))}
        for gj in P.g
    ]
    try:
        result = minimize(
            fun, y0, jac=jac, method="SLSQP",
            bounds=list(P.box.y), constraints=constraints,
            options={"ftol": 1e-14, "maxiter": 300},
        )
    except (ExprDomainError, ValueError) as e:
        logger.debug(f"SLSQP failed from {y0.tolist()} at x={x}: {e}")
        return None
    return np.asarray(result.x, dtype=float)


def _near_active(P: BilevelProblem, x: float, y: np.ndarray) -> Tuple[int, ...]:
    return tuple(j for j, v in enumerate(P.g_values(x, y)) if v >= -NEAR_ACTIVE)


def _kkt_estimate(P: BilevelProblem, x: float, y: np.ndarray, J: Sequence[int]) -> np.ndarray:
    if not J:
        return np.zeros(0)
    Gy = P.g_grad_y(x, y, J)
    u, *_ = np.linalg.lstsq(Gy.T, -P.f.grad_y(x, y), rcond=None)
    return u


def polish(P: BilevelProblem, x: float, y: np.ndarray) -> Optional[LowerMember]:
    """
    Refine an approximate minimizer on its active-set system

    Tries the KKT system first (dropping constraints whose multiplier
    turns negative), then the FJ system; falls back to the raw point if
    both fail and it is feasible.
    """
    tol = P.tol
    try:
        J = list(_near_active(P, x, y))
    except ExprDomainError:
        return None

    for _ in range(P.p + 1):
        u_J = _kkt_estimate(P, x, y, J)
        result = newton_correct(P, x, y, u_J, J)
        if not result.converged:
            break
        K, _ = kkt_jacobian(P, x, result.y, result.u, J)
        if jacobian_condition(K) > 1.0 / tol.rank:
            break
        negative = [j for j, uj in zip(J, result.u) if uj < -tol.mult]
        if negative:
            J = [j for j in J if j not in negative]
            continue
        if _acceptable(P, x, result.y, y):
            u = np.zeros(P.p)
            u[J] = result.u
            return _member(P, x, result.y, u, 1.0, "kkt-newton")
        break

    if J:
        k = len(J)
        fj = fj_polish(P, x, y, 0.5, np.full(k, 0.5 / k), J)
        if fj.converged and fj.u[0] >= -tol.mult and np.all(fj.u[1:] >= -tol.mult) and _acceptable(P, x, fj.y, y):
            u = np.zeros(P.p)
            u[J] = np.maximum(fj.u[1:], 0.0)
            u0 = max(float(fj.u[0]), 0.0)
            return _member(P, x, fj.y, u, u0, "fj-gauss-newton")

    try:
        if np.all(P.g_values(x, y) <= tol.act):
            return _member(P, x, y, None, None, "slsqp")
    except ExprDomainError:
        pass
    return None


def _acceptable(P: BilevelProblem, x: float, y_new: np.ndarray, y_start: np.ndarray) -> bool:
    cell = (P.box.y_upper - P.box.y_lower) / max(P.tol.grid - 1, 1)
    if np.any(np.abs(y_new - y_start) > 10 * np.maximum(cell, 1e-6)):
        return False
    try:
        return bool(np.all(P.g_values(x, y_new) <= P.tol.act)) and P.box.contains(x, y_new, slack=1e-9)
    except ExprDomainError:
        return False


def _member(P: BilevelProblem, x: float, y: np.ndarray, u, u0, method: str) -> LowerMember:
    g = P.g_values(x, y)
    active = tuple(j for j, v in enumerate(g) if abs(v) <= P.tol.act)
    if u is not None:
        u = np.where(np.isin(np.arange(P.p), active), u, 0.0)
    return LowerMember(np.asarray(y, dtype=float), P.f.value(x, y), active, u, u0, method)


def _solve(P: BilevelProblem, x: float) -> LowerSolution:
    tol = P.tol
    Y, cell = grid_points(P)
    with np.errstate(all="ignore"):
        fvals = P.f.values(x, Y)
        viol = max_violation(P, x, Y)
    feasible = (viol <= tol.act) & np.isfinite(fvals)
    solution = LowerSolution(x=x, grid_points=Y.shape[0], feasible_points=int(feasible.sum()))

    if feasible.any():
        scores = np.where(feasible, fvals, np.inf)
    else:
        scores = np.where(np.isfinite(viol), viol, np.inf)
        logger.debug(f"No feasible grid point at x={x}; seeding from least-violating points")
    seeds = select_seeds(Y, scores, tol.starts, 3 * cell)

    candidates: List[LowerMember] = []
    for seed in seeds:
        y = _slsqp(P, x, seed)
        if y is None:
            continue
        member = polish(P, x, y)
        if member is not None:
            candidates.append(member)
    if feasible.any():
        # Grid minimum itself guards against every start failing
        best_grid = Y[int(np.argmin(scores))]
        member = polish(P, x, best_grid)
        if member is not None:
            candidates.append(member)

    if not candidates:
        logger.debug(f"Lower level infeasible in the box at x={x}")
        return solution

    candidates.sort(key=lambda mem: mem.value)
    best = candidates[0].value
    members: List[LowerMember] = []
    for mem in candidates:
        if mem.value > best + tol.res:
            break
        if all(np.any(np.abs(mem.y - kept.y) > cell) for kept in members):
            members.append(mem)
    solution.members = members
    solution.value = best
    solution.inconclusive = any(P.box.on_y_boundary(mem.y, 1e-7) for mem in members)
    if solution.inconclusive:
        logger.warning(f"Lower-level minimum on the search-box boundary at x={x}")
    return solution


@lru_cache(maxsize=4096)
def _solve_cached(P: BilevelProblem, x: float) -> LowerSolution:
    return _solve(P, x)


def solve_lower_global(P: BilevelProblem, x: float) -> LowerSolution:
    """
    Global minimizers S(x) and value V(x) of the lower-level problem

    Args:
        P: Problem with a declared search box
        x: Upper-level variable

    Returns:
        LowerSolution; no members when the lower level is infeasible in
        the box, inconclusive set when a member touches the box boundary
    """
    return _solve_cached(P, float(x))


def value_function(P: BilevelProblem, x: float) -> float:
    """V(x); +inf where the lower level is infeasible"""
    return solve_lower_global(P, x).value


def snap_to_query(P: BilevelProblem, solution: LowerSolution, y_query: Sequence[float],
                  radius: float = 1e-5) -> LowerSolution:
    """
    Replace the member nearest to y_query by y_query itself when they
    agree to within radius and y_query attains V(x) up to tau_res
    """
    member, dist = solution.nearest(y_query)
    if member is None or dist > radius:
        return solution
    y = np.asarray(y_query, dtype=float)
    try:
        if not np.all(P.g_values(solution.x, y) <= P.tol.act):
            return solution
        if P.f.value(solution.x, y) > solution.value + P.tol.res:
            return solution
    except ExprDomainError:
        return solution
    snapped = _member(P, solution.x, y, None, None, "query")
    members = [snapped if mem is member else mem for mem in solution.members]
    return LowerSolution(solution.x, members, solution.value, solution.inconclusive,
                         solution.grid_points, solution.feasible_points)
