"""
Dense Linear Algebra Helpers

Small dense routines shared by the analysis services: tolerance-based
rank, null spaces, plain and bound-constrained least squares, and
enumeration of basic feasible solutions of { E z = b, z >= 0 }.
"""

import itertools
import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import null_space as _scipy_null_space
from scipy.optimize import linprog, lsq_linear

logger = logging.getLogger(__name__)


def singular_values(A: np.ndarray) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.size == 0:
        return np.zeros(0)
    return np.linalg.svd(A, compute_uv=False)


def rank_cutoff(s: np.ndarray, tol: float) -> float:
    """Absolute cutoff tol * max(1, s_max)"""
    largest = float(s[0]) if s.size else 0.0
    return tol * max(1.0, largest)


def numerical_rank(A: np.ndarray, tol: float) -> int:
    """Number of singular values above tol * max(1, s_max)"""
    s = singular_values(A)
    if s.size == 0:
        return 0
    return int(np.sum(s > rank_cutoff(s, tol)))


def null_space(A: np.ndarray, tol: float, ncols: Optional[int] = None) -> np.ndarray:
    """
    Orthonormal basis of ker(A)

    Args:
        A: Matrix with ncols columns (may have zero rows)
        tol: Relative singular-value cutoff
        ncols: Column count, needed when A has no rows

    Returns:
        Matrix whose columns span the null space
    """
    A = np.asarray(A, dtype=float)
    if A.size == 0:
        n = ncols if ncols is not None else (A.shape[1] if A.ndim == 2 else 0)
        return np.eye(n)
    s = singular_values(A)
    return _scipy_null_space(A, rcond=rank_cutoff(s, tol) / max(float(s[0]), 1e-300))


def least_squares(A: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, float]:
    """Minimum-norm least-squares solution and its max-abs residual"""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    if A.shape[1] == 0:
        return np.zeros(0), float(np.max(np.abs(b))) if b.size else 0.0
    z, *_ = np.linalg.lstsq(A, b, rcond=None)
    residual = float(np.max(np.abs(A @ z - b))) if b.size else 0.0
    return z, residual


def bounded_least_squares(A: np.ndarray, b: np.ndarray,
                          lower: Sequence[float], upper: Sequence[float]) -> Tuple[np.ndarray, float]:
    """
    Least squares with box bounds on the unknowns

    Uses bounded-variable least squares, which is exact for the small
    systems built by the optimality checks.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    if A.shape[1] == 0:
        return np.zeros(0), float(np.max(np.abs(b))) if b.size else 0.0
    if np.all(np.isinf(lower)) and np.all(np.isinf(upper)):
        return least_squares(A, b)
    result = lsq_linear(A, b, bounds=(lower, upper), method="bvls", tol=1e-14, lsmr_tol=None)
    z = np.clip(result.x, lower, upper)
    residual = float(np.max(np.abs(A @ z - b))) if b.size else 0.0
    return z, residual


def enumerate_basic_solutions(E: np.ndarray, b: np.ndarray, tol_rank: float,
                              tol_res: float, tol_sign: float,
                              dedupe: float = 1e-9) -> List[np.ndarray]:
    """
    Vertices of the polyhedron { z : E z = b, z >= 0 }

    Every vertex is a basic feasible solution: its support columns are
    linearly independent. All supports up to rank(E) are tried, which is
    exact at the sizes handled here (a handful of columns).

    Args:
        E: Constraint matrix, shape (r, c)
        b: Right-hand side, length r
        tol_rank: Rank cutoff for the independence test of a support
        tol_res: Max-abs residual accepted for E z = b
        tol_sign: Components >= -tol_sign count as nonnegative (then clipped)
        dedupe: Vertices closer than this (max-abs) are merged

    Returns:
        List of vertices, each a length-c vector
    """
    E = np.atleast_2d(np.asarray(E, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    cols = E.shape[1]
    max_support = min(cols, numerical_rank(E, tol_rank)) if E.size else 0
    vertices: List[np.ndarray] = []
    for size in range(0, max_support + 1):
        for support in itertools.combinations(range(cols), size):
            sub = E[:, support]
            if size and numerical_rank(sub, tol_rank) < size:
                continue
            z_s, residual = least_squares(sub, b) if size else (np.zeros(0), float(np.max(np.abs(b))) if b.size else 0.0)
            if residual > tol_res or np.any(z_s < -tol_sign):
                continue
            z = np.zeros(cols)
            z[list(support)] = np.maximum(z_s, 0.0)
            if np.max(np.abs(E @ z - b), initial=0.0) > tol_res:
                continue
            if any(np.max(np.abs(z - v), initial=0.0) <= dedupe for v in vertices):
                continue
            vertices.append(z)
    logger.debug(f"Enumerated {len(vertices)} basic solutions over {cols} columns")
    return vertices


def strict_direction(A: np.ndarray, margin: float) -> Tuple[bool, np.ndarray, float, Optional[np.ndarray]]:
    """
    Decide whether some d has A d < 0 componentwise

    Solves  max t  s.t.  A d + t <= 0,  -1 <= d <= 1,  t <= 1.
    The strict system is solvable iff the optimum t* exceeds margin.
    When it is not, a Gordan certificate lam >= 0, sum(lam) = 1,
    A^T lam = 0 is returned instead.

    Returns:
        Tuple of (solvable, d, t_star, gordan_certificate)
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    rows, n = A.shape
    if A.size == 0:
        return True, np.zeros(n), 1.0, None
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A_ub = np.hstack([A, np.ones((rows, 1))])
    bounds = [(-1.0, 1.0)] * n + [(None, 1.0)]
    result = linprog(c, A_ub=A_ub, b_ub=np.zeros(rows), bounds=bounds, method="highs")
    if result.status != 0:
        logger.warning(f"Direction LP ended with status {result.status}: {result.message}")
        return False, np.zeros(n), 0.0, None
    d, t_star = result.x[:n], float(result.x[-1])
    if t_star > margin:
        return True, d, t_star, None

    gordan = linprog(
        np.zeros(rows),
        A_eq=np.vstack([A.T, np.ones((1, rows))]),
        b_eq=np.concatenate([np.zeros(n), [1.0]]),
        bounds=[(0.0, None)] * rows,
        method="highs",
    )
    certificate = gordan.x if gordan.status == 0 else None
    return False, d, t_star, certificate
