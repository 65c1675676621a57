"""
Multiplier Analysis

Fritz John and KKT multiplier sets of the lower-level problem at a
point, with their exact structure, and the stationarity flags

    KKT point  =>  FJ point  =>  generalized critical (g.c.) point

FJ multipliers (u0, u) live in R^{1+p} on the simplex sum = 1.
KKT multipliers u live in R^p. Components outside the active set are 0.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.linalg import (
    bounded_least_squares, enumerate_basic_solutions, numerical_rank, strict_direction,
)
from services.problem_model import BilevelProblem, active_set, check_point, lower_feasible

logger = logging.getLogger(__name__)

EMPTY = "empty"
SINGLETON = "singleton"
RAY = "ray"
SEGMENT = "segment"
POLYTOPE = "polytope"

KKT_CERTIFIED = "kkt-certified"
UNDETERMINED = "undetermined"


@dataclass
class MultiplierSet:
    """
    Polyhedral multiplier set: conv(vertices) + cone(rays).

    For FJ sets the coordinates are (u0, u1..up); for KKT sets (u1..up).
    """
    kind: str
    vertices: List[np.ndarray]
    rays: List[np.ndarray] = field(default_factory=list)
    residual: float = 0.0
    fritz_john: bool = False
    active: Tuple[int, ...] = ()

    @property
    def is_empty(self) -> bool:
        return self.kind == EMPTY

    @property
    def base(self) -> Optional[np.ndarray]:
        return self.vertices[0] if self.vertices else None

    def contains(self, point: Sequence[float], tol: float = 1e-8) -> bool:
        """Membership by nonnegative combination of vertices and rays"""
        point = np.asarray(point, dtype=float)
        if self.is_empty:
            return False
        columns = self.vertices + self.rays
        A = np.vstack([np.column_stack(columns), np.r_[np.ones(len(self.vertices)), np.zeros(len(self.rays))]])
        b = np.r_[point, 1.0]
        _, residual = bounded_least_squares(A, b, np.zeros(len(columns)), np.full(len(columns), np.inf))
        return residual <= tol

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "coordinates": "u0,u" if self.fritz_john else "u",
            "vertices": [v.tolist() for v in self.vertices],
            "rays": [r.tolist() for r in self.rays],
            "residual": self.residual,
        }


@dataclass
class StationarityFlags:
    is_gc: bool
    is_fj: bool
    is_kkt: bool
    b_status: str
    is_b: Optional[bool] = None
    active: Tuple[int, ...] = ()
    feasible: bool = True

    def to_dict(self) -> Dict:
        return {
            "is_gc": self.is_gc,
            "is_fj": self.is_fj,
            "is_kkt": self.is_kkt,
            "b_status": self.b_status,
            "is_b": self.is_b,
            "feasible": self.feasible,
        }


def _set_kind(n_vertices: int, n_rays: int) -> str:
    if n_vertices == 0:
        return EMPTY
    if n_rays == 0:
        return {1: SINGLETON, 2: SEGMENT}.get(n_vertices, POLYTOPE)
    if n_vertices == 1 and n_rays == 1:
        return RAY
    return POLYTOPE


def fj_system(P: BilevelProblem, x: float, y, J: Sequence[int]) -> np.ndarray:
    """Columns [grad_y f, grad_y g_j (j in J)], shape (m, 1+|J|)"""
    return np.column_stack([P.f.grad_y(x, y)] + [P.g[j].grad_y(x, y) for j in J])


def fj_multipliers(P: BilevelProblem, x: float, y: Sequence[float]) -> MultiplierSet:
    """
    Full FJ multiplier set at (x, y)

    Solves u0 grad_y f + sum_{j in J0} u_j grad_y g_j = 0, (u0, u) >= 0,
    u0 + sum u = 1. The set is a bounded polytope, so it is the convex
    hull of its basic feasible solutions.

    Returns:
        MultiplierSet in (u0, u1..up) coordinates; kind EMPTY when y is
        not a FJ point
    """
    y = check_point(P, y)
    J = active_set(P, x, y)
    tol = P.tol
    A = fj_system(P, x, y, J)
    E = np.vstack([A, np.ones((1, A.shape[1]))])
    b = np.r_[np.zeros(P.m), 1.0]
    local = enumerate_basic_solutions(E, b, tol.rank, tol.res, tol.mult)

    vertices = []
    for z in local:
        full = np.zeros(1 + P.p)
        full[0] = z[0]
        full[[1 + j for j in J]] = z[1:]
        vertices.append(full)
    residual = max((float(np.max(np.abs(E @ z - b))) for z in local), default=0.0)
    result = MultiplierSet(_set_kind(len(vertices), 0), vertices, [], residual, True, J)
    logger.debug(f"FJ set at x={x}: {result.kind} with {len(vertices)} vertices")
    return result


def kkt_multipliers(P: BilevelProblem, x: float, y: Sequence[float]) -> MultiplierSet:
    """
    Full KKT multiplier set at (x, y)

    Vertices are basic solutions of G u = -grad_y f, u >= 0 with G the
    active y-gradients as columns; recession directions are basic
    solutions of G d = 0, d >= 0, sum d = 1, scaled to max-norm 1.

    Returns:
        MultiplierSet in (u1..up) coordinates; kind EMPTY when y is not a
        KKT point
    """
    y = check_point(P, y)
    J = active_set(P, x, y)
    tol = P.tol
    G = P.g_grad_y(x, y, J).T.reshape(P.m, len(J))
    rhs = -P.f.grad_y(x, y)
    local = enumerate_basic_solutions(G, rhs, tol.rank, tol.res, tol.mult)

    directions = []
    if local and J:
        E = np.vstack([G, np.ones((1, len(J)))])
        b = np.r_[np.zeros(P.m), 1.0]
        for d in enumerate_basic_solutions(E, b, tol.rank, tol.res, tol.mult):
            directions.append(d / np.max(np.abs(d)))

    def embed(z):
        full = np.zeros(P.p)
        full[list(J)] = z
        return full

    vertices = [embed(z) for z in local]
    rays = [embed(d) for d in directions]
    residual = max((float(np.max(np.abs(G @ z - rhs), initial=0.0)) for z in local), default=0.0)
    result = MultiplierSet(_set_kind(len(vertices), len(rays)), vertices, rays, residual, False, J)
    logger.debug(f"KKT set at x={x}: {result.kind} with {len(vertices)} vertices, {len(rays)} rays")
    return result


def constraints_affine_in_y(P: BilevelProblem, J: Sequence[int]) -> bool:
    return all(P.g[j].affine_in_y for j in J)


def mfcq_holds(P: BilevelProblem, x: float, y, J: Sequence[int]) -> bool:
    Gy = P.g_grad_y(x, y, J)
    holds, _, _, _ = strict_direction(Gy, P.tol.rank)
    return holds


def stationarity_status(P: BilevelProblem, x: float, y: Sequence[float]) -> StationarityFlags:
    """
    Stationarity flags at (x, y)

    is_gc: the columns [grad_y f, grad_y g_J0] are linearly dependent
    is_fj / is_kkt: the corresponding multiplier set is nonempty
    b_status: kkt-certified when the point is KKT, or when MFCQ or affine
        constraints make B-stationarity equivalent to KKT; the B verdict
        is then reported in is_b

    Infeasible points get all flags false.
    """
    y = check_point(P, y)
    if not lower_feasible(P, x, y):
        return StationarityFlags(False, False, False, UNDETERMINED, None, (), False)

    J = active_set(P, x, y)
    A = fj_system(P, x, y, J)
    is_gc = numerical_rank(A, P.tol.rank) < A.shape[1]
    is_kkt = not kkt_multipliers(P, x, y).is_empty
    is_fj = is_kkt or not fj_multipliers(P, x, y).is_empty
    is_gc = is_gc or is_fj

    if is_kkt or constraints_affine_in_y(P, J) or mfcq_holds(P, x, y, J):
        return StationarityFlags(is_gc, is_fj, is_kkt, KKT_CERTIFIED, is_kkt, J)
    return StationarityFlags(is_gc, is_fj, is_kkt, UNDETERMINED, None, J)
