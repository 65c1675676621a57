"""
Active-Set Branch Systems

Nonlinear systems whose solution curves are the stationary branches of
the lower-level problem, their Newton correctors and their derivatives:

- KKT active-set system in (y, u_J) at fixed x:
      grad_y f + sum_{j in J} u_j grad_y g_j = 0,   g_J = 0
- FJ system in (y, u0, u_J) at fixed x (u0 + sum u_J = 1)
- FJ system in (x, y, u_J) with u0 as the parameter, used at points
  where the KKT system degenerates
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from services.errors import ExprDomainError, SingularJacobianError
from services.linalg import null_space
from services.problem_model import BilevelProblem

logger = logging.getLogger(__name__)


@dataclass
class NewtonResult:
    y: np.ndarray
    u: np.ndarray
    converged: bool
    residual: float
    iterations: int


def kkt_residual(P: BilevelProblem, x: float, y, u_J, J: Sequence[int]) -> np.ndarray:
    grad = P.f.grad_y(x, y)
    for uj, j in zip(u_J, J):
        grad = grad + uj * P.g[j].grad_y(x, y)
    constraints = np.array([P.g[j].value(x, y) for j in J])
    return np.concatenate([grad, constraints])


def kkt_jacobian(P: BilevelProblem, x: float, y, u_J, J: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Jacobian of the active-set system in (y, u_J) and its x-derivative

    Returns:
        Tuple of (K, b) with K = [[H_L, Gy^T], [Gy, 0]] and
        b = [d/dx grad_y L ; grad_x g_J]
    """
    m, k = P.m, len(J)
    u_full = np.zeros(P.p)
    u_full[list(J)] = u_J
    H = P.lagrangian_hessian(x, y, 1.0, u_full)
    Gy = P.g_grad_y(x, y, J)
    K = np.zeros((m + k, m + k))
    K[:m, :m] = H[1:, 1:]
    K[:m, m:] = Gy.T
    K[m:, :m] = Gy
    b = np.concatenate([H[1:, 0], P.g_grad_x(x, y, J)])
    return K, b


def _check_conditioning(K: np.ndarray, tol_rank: float, context: str):
    if K.size == 0:
        return
    U, s, Vt = np.linalg.svd(K)
    if s[-1] <= tol_rank * max(1.0, s[0]):
        weak = Vt[s <= tol_rank * max(1.0, s[0])]
        raise SingularJacobianError(
            f"{context}: Jacobian numerically singular (sigma_min = {s[-1]:.3e}, sigma_max = {s[0]:.3e})",
            directions=weak,
            singular_values=s,
        )


def jacobian_condition(K: np.ndarray) -> float:
    if K.size == 0:
        return 1.0
    s = np.linalg.svd(K, compute_uv=False)
    return float(s[0] / s[-1]) if s[-1] > 0 else float("inf")


def implicit_derivatives(P: BilevelProblem, x: float, y, u, J: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Total x-derivatives of a branch of the active-set system

    Args:
        P: Problem
        x, y: Point on the branch
        u: KKT multipliers, either length p or length |J|
        J: Active index set defining the branch

    Returns:
        Tuple of (D_x y of length m, D_x u of length p, zero off J)

    Raises:
        SingularJacobianError: system Jacobian singular, with the
            near-null directions in (y, u_J) coordinates
    """
    y = np.asarray(y, dtype=float)
    u = np.asarray(u, dtype=float)
    u_J = u[list(J)] if u.size == P.p and P.p != len(J) else u
    K, b = kkt_jacobian(P, x, y, u_J, J)
    _check_conditioning(K, P.tol.rank, f"Branch with J={[j + 1 for j in J]} at x={x:.6g}")
    d = np.linalg.solve(K, -b)
    Du = np.zeros(P.p)
    Du[list(J)] = d[P.m:]
    return d[:P.m], Du


def newton_correct(P: BilevelProblem, x: float, y0, u0_J, J: Sequence[int],
                   tol: Optional[float] = None, max_iter: int = 40) -> NewtonResult:
    """
    Damped Newton on the active-set system at fixed x

    Steps are halved until the residual norm decreases; the iteration
    stops when the max-abs residual drops below tol.
    """
    tol = P.tol.res * 1e-2 if tol is None else tol
    y = np.asarray(y0, dtype=float).copy()
    u = np.asarray(u0_J, dtype=float).copy()
    m = P.m
    try:
        r = kkt_residual(P, x, y, u, J)
    except ExprDomainError:
        return NewtonResult(y, u, False, float("inf"), 0)
    norm = float(np.linalg.norm(r))
    for it in range(1, max_iter + 1):
        if np.max(np.abs(r), initial=0.0) <= tol:
            return NewtonResult(y, u, True, float(np.max(np.abs(r), initial=0.0)), it - 1)
        K, _ = kkt_jacobian(P, x, y, u, J)
        step, *_ = np.linalg.lstsq(K, -r, rcond=None)
        t = 1.0
        while t >= 1e-4:
            y_new, u_new = y + t * step[:m], u + t * step[m:]
            try:
                r_new = kkt_residual(P, x, y_new, u_new, J)
            except ExprDomainError:
                t *= 0.5
                continue
            norm_new = float(np.linalg.norm(r_new))
            if norm_new < norm or norm_new <= tol:
                break
            t *= 0.5
        else:
            break
        y, u, r, norm = y_new, u_new, r_new, norm_new
    final = float(np.max(np.abs(r), initial=0.0))
    return NewtonResult(y, u, final <= tol, final, max_iter)


def fj_residual(P: BilevelProblem, x: float, y, u0: float, u_J, J: Sequence[int]) -> np.ndarray:
    grad = u0 * P.f.grad_y(x, y)
    for uj, j in zip(u_J, J):
        grad = grad + uj * P.g[j].grad_y(x, y)
    constraints = np.array([P.g[j].value(x, y) for j in J])
    return np.concatenate([grad, [u0 + float(np.sum(u_J)) - 1.0], constraints])


def _fj_blocks(P: BilevelProblem, x: float, y, u0: float, u_J, J: Sequence[int]):
    u_full = np.zeros(P.p)
    u_full[list(J)] = u_J
    H = P.lagrangian_hessian(x, y, u0, u_full)
    Gy = P.g_grad_y(x, y, J)
    return H, Gy


def fj_polish(P: BilevelProblem, x: float, y0, u0: float, u0_J, J: Sequence[int],
              tol: Optional[float] = None, max_iter: int = 200) -> NewtonResult:
    """
    Gauss-Newton on the FJ system in (y, u0, u_J) at fixed x

    Used where the KKT system is singular (u0 near 0). Stops when the step
    stalls; degenerate roots converge only linearly. Returns u as the full
    FJ vector (u0, u_J).
    """
    tol = P.tol.res * 1e-2 if tol is None else tol
    m, k = P.m, len(J)
    z = np.concatenate([np.asarray(y0, dtype=float), [u0], np.asarray(u0_J, dtype=float)])
    iterations = max_iter
    for it in range(max_iter):
        y, w0, w = z[:m], z[m], z[m + 1:]
        try:
            r = fj_residual(P, x, y, w0, w, J)
        except ExprDomainError:
            return NewtonResult(z[:m], z[m:], False, float("inf"), it)
        H, Gy = _fj_blocks(P, x, y, w0, w, J)
        Jac = np.zeros((m + 1 + k, m + 1 + k))
        Jac[:m, :m] = H[1:, 1:]
        Jac[:m, m] = P.f.grad_y(x, y)
        Jac[:m, m + 1:] = Gy.T
        Jac[m, m:] = 1.0
        Jac[m + 1:, :m] = Gy
        step, *_ = np.linalg.lstsq(Jac, -r, rcond=None)
        z = z + step
        if np.max(np.abs(step)) <= 1e-15:
            iterations = it + 1
            break
    try:
        final = float(np.max(np.abs(fj_residual(P, x, z[:m], z[m], z[m + 1:], J))))
    except ExprDomainError:
        final = float("inf")
    return NewtonResult(z[:m], z[m:], final <= tol, final, iterations)


def fj_parameter_derivative(P: BilevelProblem, x: float, y, u0: float, u_J,
                            J: Sequence[int]) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Derivative of the FJ curve (x, y, u_J)(u0) with respect to u0

    The system u0 grad_y f + sum u_j grad_y g_j = 0, u0 + sum u_j = 1,
    g_J = 0 is square in (x, y, u_J); near a point with u0 = 0 it is
    solvable for the curve when its Jacobian is nonsingular.

    Returns:
        Tuple of (dx/du0, dy/du0, du_J/du0)
    """
    m, k = P.m, len(J)
    H, Gy = _fj_blocks(P, x, y, u0, u_J, J)
    Jac = np.zeros((m + 1 + k, 1 + m + k))
    Jac[:m, 0] = H[1:, 0]
    Jac[:m, 1:m + 1] = H[1:, 1:]
    Jac[:m, m + 1:] = Gy.T
    Jac[m, m + 1:] = 1.0
    Jac[m + 1:, 0] = P.g_grad_x(x, y, J)
    Jac[m + 1:, 1:m + 1] = Gy
    rhs = -np.concatenate([P.f.grad_y(x, y), [1.0], np.zeros(k)])
    _check_conditioning(Jac, P.tol.rank, f"FJ curve at x={x:.6g}")
    d = np.linalg.solve(Jac, rhs)
    return float(d[0]), d[1:m + 1], d[m + 1:]


def reduced_hessian(P: BilevelProblem, x: float, y, u, J: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """
    V^T H_yy(f + u^T g) V with V a basis of the tangent space of g_J

    Args:
        u: KKT multipliers, length p

    Returns:
        Tuple of (reduced Hessian, V)
    """
    H = P.lagrangian_hessian(x, y, 1.0, u)[1:, 1:]
    Gy = P.g_grad_y(x, y, J)
    V = null_space(Gy, P.tol.rank, ncols=P.m)
    return V.T @ H @ V, V
