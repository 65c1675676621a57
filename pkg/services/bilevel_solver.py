"""
Bilevel Solver

Desk-scale global solve of the bilevel program: scan an x-grid over the
search box, take the best upper-level value over the global lower-level
minimizers M at each grid point, then polish x with a bounded scalar
minimization of the optimal-value function F(x, S(x)) on the cells
around the best grid point.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.optimize import minimize_scalar

from services.errors import ExprDomainError, InfeasiblePointError
from services.lower_level import LowerMember, solve_lower_global
from services.problem_model import BilevelProblem, upper_feasible

logger = logging.getLogger(__name__)

DEFAULT_POINTS = 201
PENALTY = 1e10


@dataclass
class SolveResult:
    x: float
    y: np.ndarray
    F: float
    grid_points: int
    feasible_points: int
    inconclusive_points: int
    polished: bool

    def to_dict(self) -> Dict:
        return {
            "x": self.x,
            "y": self.y.tolist(),
            "F": self.F,
            "grid_points": self.grid_points,
            "feasible_points": self.feasible_points,
            "inconclusive_points": self.inconclusive_points,
            "polished": self.polished,
        }


def _best_member(P: BilevelProblem, x: float) -> Tuple[Optional[LowerMember], float, bool]:
    """Member of S(x) with the smallest F among those satisfying G <= 0"""
    solution = solve_lower_global(P, x)
    best, best_F = None, float("inf")
    for mem in solution.members:
        try:
            if not upper_feasible(P, x, mem.y):
                continue
            F = float(P.F.value(x, mem.y))
        except ExprDomainError:
            continue
        if F < best_F:
            best, best_F = mem, F
    return best, best_F, solution.inconclusive


def solve(P: BilevelProblem, points: int = DEFAULT_POINTS) -> SolveResult:
    """
    Best feasible (x, y) of the bilevel program in the search box

    Args:
        P: Problem with a declared search box
        points: x-grid size

    Raises:
        InfeasiblePointError: no grid point has a feasible lower-level
            minimizer satisfying the upper constraints
    """
    xs = np.linspace(P.box.x[0], P.box.x[1], max(points, 3))
    values = np.full(xs.size, np.inf)
    inconclusive = 0
    for i, x in enumerate(xs):
        _, values[i], flagged = _best_member(P, float(x))
        inconclusive += int(flagged)
    feasible = np.isfinite(values)
    if not feasible.any():
        raise InfeasiblePointError("Bilevel program has no feasible point in the search box")
    if inconclusive:
        logger.warning(f"{inconclusive} grid point(s) had a lower-level minimum on the box boundary")

    i = int(np.argmin(values))
    x_best = float(xs[i])
    member, F_best, _ = _best_member(P, x_best)
    y_best = member.y

    def objective(x: float) -> float:
        _, F, _ = _best_member(P, float(x))
        return F if np.isfinite(F) else PENALTY

    lo, hi = float(xs[max(i - 1, 0)]), float(xs[min(i + 1, xs.size - 1)])
    polished = False
    result = minimize_scalar(objective, bounds=(lo, hi), method="bounded", options={"xatol": 1e-9})
    if result.success and result.fun < F_best:
        x_new = float(result.x)
        member, F_new, _ = _best_member(P, x_new)
        if member is not None:
            x_best, y_best, F_best, polished = x_new, member.y, F_new, True

    logger.info(f"Bilevel solve: x* = {x_best:.9g}, y* = {y_best.tolist()}, F* = {F_best:.9g}")
    return SolveResult(x_best, y_best, F_best, int(xs.size), int(feasible.sum()), inconclusive, polished)
