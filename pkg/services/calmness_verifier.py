"""
Calmness Verifier

Sampled evidence for the error-bound conditions behind the optimality
results: the partial error bound (PEB) and uniform weak sharp minimum
(UWSM) moduli over a stationarity set, Sigma_FJ = M near Case-I points,
and partial calmness of the penalized program

    min F(x, y) + mu (f(x, y) - V(x))  over  Sigma ∩ U.

Samples are drawn at three nested refinement levels. Stationary points
come from Newton solves of the active-set systems along an x-grid
through the candidate; Sigma_f points come from rays leaving S(x) into
the feasible region. Every evaluated sample is logged by SampleTracer,
so the reported supremum or minimum always has a witness.

None of this is a proof; verdicts are sampled evidence.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from services.branch_system import newton_correct
from services.continuation import solution_map
from services.errors import (
    ExprDomainError, InconclusiveError, InfeasiblePointError, PreconditionError,
)
from services.lower_level import max_violation, solve_lower_global
from services.multiplier_analysis import stationarity_status
from services.problem_model import (
    BilevelProblem, active_set, check_point, lower_feasible, upper_feasible,
)
from services.sample_tracer import SampleTracer
from services.type_classifier import CASE_I, classify_simplicity

logger = logging.getLogger(__name__)

B_SURROGATE = "B-surrogate"
KKT = "KKT"
FJ = "FJ"
GC = "gc"
F_SET = "f"
CONDITIONS = (B_SURROGATE, KKT, FJ, GC, F_SET)
CALMNESS_CONDITIONS = (FJ, KKT)

HOLDS_WITH_L = "holds-with-L"
NUMERATOR_ZERO = "numerator-zero"
UNBOUNDED_SUSPECT = "unbounded-suspect"
HOLDS = "holds"
FAILS = "fails"

LEVELS = 3
DEDUPE_TOL = 1e-7
ZERO_GAP = 1e-10
ZERO_DISTANCE = 1e-7
GROWTH_FACTOR = 2.0
PERTURBED_SEEDS = 3
BASE_DIRECTIONS = 8
RHO_STEPS = 21
EMPTY_RUN = 3


@dataclass
class StationarySample:
    """Sampled point with the stationarity sets it belongs to"""
    x: float
    y: np.ndarray
    level: int
    origin: str
    gc: bool = False
    fj: bool = False
    kkt: bool = False
    b: bool = False

    def member_of(self, condition: str) -> bool:
        return {
            B_SURROGATE: self.b,
            KKT: self.kkt,
            FJ: self.fj,
            GC: self.gc,
            F_SET: True,
        }[condition]


@dataclass
class SamplePool:
    """Samples in the ball of given radius around (x_bar, y_bar)"""
    x_bar: float
    y_bar: np.ndarray
    radius: float
    samples: List[StationarySample] = field(default_factory=list)
    xs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    x_levels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    with_rays: bool = False

    def add(self, sample: StationarySample, dedupe: bool = True):
        if dedupe:
            z = np.r_[sample.x, sample.y]
            for kept in self.samples:
                if kept.origin == "ray":
                    continue
                if np.linalg.norm(np.r_[kept.x, kept.y] - z) <= DEDUPE_TOL:
                    kept.gc |= sample.gc
                    kept.fj |= sample.fj
                    kept.kkt |= sample.kkt
                    kept.b |= sample.b
                    kept.level = min(kept.level, sample.level)
                    return
        self.samples.append(sample)

    def select(self, condition: str) -> List[StationarySample]:
        _check_condition(condition, CONDITIONS)
        return [s for s in self.samples if s.member_of(condition)]

    def inside(self, x: float, y: np.ndarray) -> bool:
        return float(np.linalg.norm(np.r_[x - self.x_bar, y - self.y_bar])) <= self.radius

    def counts(self) -> Dict[str, int]:
        return {c: len(self.select(c)) for c in CONDITIONS}


@dataclass
class PEBReport:
    """Estimated modulus of a PEB or UWSM condition"""
    kind: str
    condition: str
    radius: float
    v_max: float
    samples: int
    modulus: float
    verdict: str
    level_sups: List[float]
    half_radius_sup: float
    worst: Optional[Dict] = None
    dropped: int = 0
    at_zero: int = 0
    trace: Optional[SampleTracer] = field(default=None, repr=False)
    segments: Optional[np.ndarray] = field(default=None, repr=False)

    def to_dict(self) -> Dict:
        return {
            "kind": self.kind,
            "condition": self.condition,
            "radius": self.radius,
            "v_max": self.v_max,
            "samples": self.samples,
            "dropped": self.dropped,
            "at_zero": self.at_zero,
            "modulus": self.modulus,
            "verdict": self.verdict,
            "level_sups": self.level_sups,
            "half_radius_sup": self.half_radius_sup,
            "worst": self.worst,
        }


@dataclass
class CalmnessReport:
    mu: float
    condition: str
    radius: float
    samples: int
    minimum: float
    verdict: str
    witness: Optional[Dict] = None
    dropped: int = 0
    trace: Optional[SampleTracer] = field(default=None, repr=False)

    def to_dict(self) -> Dict:
        return {
            "mu": self.mu,
            "condition": self.condition,
            "radius": self.radius,
            "samples": self.samples,
            "dropped": self.dropped,
            "minimum": self.minimum,
            "verdict": self.verdict,
            "witness": self.witness,
        }


def _check_condition(condition: str, allowed: Sequence[str]):
    if condition not in allowed:
        raise PreconditionError(f"Unknown condition '{condition}'; expected one of {list(allowed)}")


def _check_candidate(P: BilevelProblem, x_bar: float, y_bar, radius: float) -> np.ndarray:
    """(x_bar, y_bar) must be feasible for the bilevel program"""
    if not radius > 0:
        raise PreconditionError(f"Sampling radius must be positive, got {radius}")
    y_bar = check_point(P, y_bar)
    if not lower_feasible(P, x_bar, y_bar) or not upper_feasible(P, x_bar, y_bar):
        raise InfeasiblePointError(f"(x={x_bar}, y={y_bar.tolist()}) is infeasible")
    solution = solve_lower_global(P, x_bar)
    if not solution.feasible or P.f.value(x_bar, y_bar) > solution.value + P.tol.res:
        raise InfeasiblePointError(
            f"y={y_bar.tolist()} is not a global lower-level minimizer at x={x_bar} "
            f"(f = {P.f.value(x_bar, y_bar):.6g}, V = {solution.value:.6g})"
        )
    return y_bar


# Refinement levels: level 0 uses every 4th grid point, level 1 every 2nd

def _x_grid(P: BilevelProblem, x_bar: float, radius: float, samples: int) -> Tuple[np.ndarray, np.ndarray]:
    intervals = 4 * max(2, int(np.ceil(samples / 4)))
    xs = np.linspace(x_bar - radius, x_bar + radius, intervals + 1)
    xs[intervals // 2] = x_bar
    offset = np.abs(np.arange(intervals + 1) - intervals // 2)
    levels = np.where(offset % 4 == 0, 0, np.where(offset % 2 == 0, 1, 2))
    keep = np.array([P.box.contains_x(x) for x in xs])
    return xs[keep], levels[keep]


def _directions(m: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Unit directions in y with nested refinement levels"""
    if m == 1:
        return np.array([[1.0], [-1.0]]), np.zeros(2, dtype=int)
    count = BASE_DIRECTIONS * 2 ** (LEVELS - 1)
    index = np.arange(count)
    if m == 2:
        phi = 2.0 * np.pi * index / count
        E = np.column_stack([np.cos(phi), np.sin(phi)])
        levels = np.where(index % 4 == 0, 0, np.where(index % 2 == 0, 1, 2))
        return E, levels
    E = rng.normal(size=(count, m))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    levels = np.searchsorted([BASE_DIRECTIONS, 2 * BASE_DIRECTIONS], index, side="right")
    return E, levels


def _rho_ladder(radius: float) -> Tuple[np.ndarray, np.ndarray]:
    k = np.arange(RHO_STEPS)
    per_level = int(np.ceil(RHO_STEPS / LEVELS))
    return radius * 2.0 ** (-k), np.minimum(k // per_level, LEVELS - 1)


def _multiplier_guess(P: BilevelProblem, x: float, y: np.ndarray, J: Sequence[int]) -> np.ndarray:
    if not J:
        return np.zeros(0)
    try:
        Gy = P.g_grad_y(x, y, J)
        u, *_ = np.linalg.lstsq(Gy.T, -P.f.grad_y(x, y), rcond=None)
    except ExprDomainError:
        return np.zeros(len(J))
    return u


def _accept(P: BilevelProblem, pool: SamplePool, x: float, y: np.ndarray) -> bool:
    if not pool.inside(x, y) or not P.box.contains(x, y, slack=1e-9):
        return False
    try:
        return lower_feasible(P, x, y)
    except ExprDomainError:
        return False


def sample_stationary_points(P: BilevelProblem, x_bar: float, y_bar: Sequence[float], radius: float,
                             samples: int = 200, seed: int = 0, rays: bool = False) -> SamplePool:
    """
    Sample stationary points of the lower level in the (x, y)-ball

    Along an x-grid through x_bar, swept outward on both sides, the
    active-set system of every subset J of the active set at the
    candidate is solved by Newton from the previous grid point's
    solutions, the candidate, the members of S(x) and a few random
    perturbations of y_bar. Solutions with u_J >= 0 are KKT (hence FJ)
    points; every solution is a generalized critical point.

    Args:
        P: Problem
        x_bar, y_bar: Candidate solution
        radius: Ball radius in (x, y)
        samples: Controls the grid density
        seed: Seed of the perturbation generator
        rays: Also sample Sigma_f along rays leaving S(x)

    Raises:
        PreconditionError: radius <= 0
        InfeasiblePointError: candidate infeasible for the bilevel program
    """
    y_bar = _check_candidate(P, x_bar, y_bar, radius)
    tol = P.tol
    rng = np.random.default_rng(seed)
    xs, levels = _x_grid(P, x_bar, radius, samples)
    pool = SamplePool(float(x_bar), y_bar, float(radius), with_rays=rays)

    flags = stationarity_status(P, x_bar, y_bar)
    pool.add(StationarySample(float(x_bar), y_bar, 0, "center",
                              flags.is_gc, flags.is_fj, flags.is_kkt, bool(flags.is_b)))

    J0 = active_set(P, x_bar, y_bar)
    subsets = [c for k in range(len(J0) + 1) for c in itertools.combinations(J0, k)]
    previous: Dict[int, List[Tuple[np.ndarray, Tuple[int, ...]]]] = {-1: [], 0: [], 1: []}
    empty_run = {-1: 0, 1: 0}
    visited: List[int] = []

    for i in np.argsort(np.abs(xs - x_bar), kind="stable"):
        x = float(xs[i])
        side = int(np.sign(x - x_bar))
        if side and empty_run[side] >= EMPTY_RUN:
            continue
        visited.append(i)
        solution = solve_lower_global(P, x)
        perturbed = [y_bar + rng.normal(scale=radius / 4, size=P.m) for _ in range(PERTURBED_SEEDS)]
        found: List[Tuple[np.ndarray, Tuple[int, ...]]] = []
        for J in subsets:
            starts = [y for y, J_prev in previous[side] if J_prev == J]
            starts += [y_bar] + [mem.y for mem in solution.members] + perturbed
            for y0 in starts:
                try:
                    result = newton_correct(P, x, y0, _multiplier_guess(P, x, y0, J), J)
                except ExprDomainError:
                    continue
                if not result.converged or not _accept(P, pool, x, result.y):
                    continue
                nonnegative = bool(np.all(result.u >= -tol.mult))
                pool.add(StationarySample(x, result.y, int(levels[i]), "branch",
                                          True, nonnegative, nonnegative, nonnegative))
                found.append((result.y, J))
        previous[side] = found
        if side:
            empty_run[side] = 0 if found else empty_run[side] + 1

    visited.sort()
    pool.xs, pool.x_levels = xs[visited], levels[visited]
    if rays:
        sample_feasible_rays(P, pool, seed=seed)
    logger.info(f"Sampled {len(pool.samples)} points around (x={x_bar}, y={y_bar.tolist()}): {pool.counts()}")
    return pool


def sample_feasible_rays(P: BilevelProblem, pool: SamplePool, seed: int = 0) -> SamplePool:
    """
    Add Sigma_f samples s + rho e, s in S(x), for every visited grid x,
    unit direction e and rho on a halving ladder, kept when feasible and
    inside the ball
    """
    rng = np.random.default_rng(seed + 1)
    E, dir_levels = _directions(P.m, rng)
    rhos, rho_levels = _rho_ladder(pool.radius)
    steps = (rhos[None, :, None] * E[:, None, :]).reshape(-1, P.m)
    step_levels = np.maximum(dir_levels[:, None], rho_levels[None, :]).reshape(-1)
    added = 0
    for x, x_level in zip(pool.xs, pool.x_levels):
        solution = solve_lower_global(P, x)
        if solution.inconclusive:
            continue
        for mem in solution.members:
            Y = mem.y[None, :] + steps
            with np.errstate(all="ignore"):
                feasible = max_violation(P, x, Y) <= P.tol.act
            for y, level, ok in zip(Y, step_levels, feasible):
                if ok and pool.inside(x, y) and P.box.contains(x, y):
                    pool.add(StationarySample(float(x), y, int(max(level, x_level)), "ray"), dedupe=False)
                    added += 1
    logger.debug(f"Added {added} ray samples")
    return pool


# Ratios

def lower_gap(P: BilevelProblem, x: float, y: Sequence[float]) -> Optional[float]:
    """f(x, y) - V(x) clamped at 0, or None when V(x) is inconclusive"""
    solution = solve_lower_global(P, x)
    if solution.inconclusive or not solution.feasible:
        return None
    return max(float(P.f.value(x, y)) - solution.value, 0.0)


def solution_distance(P: BilevelProblem, x: float, y: Sequence[float]) -> float:
    """dist_{S(x)}(y)"""
    _, dist = solve_lower_global(P, x).nearest(y)
    return dist


def minimizer_segments(P: BilevelProblem, xs: Sequence[float], kkt_only: bool = False) -> np.ndarray:
    """
    Polylines through the global minimizers M sampled on an x-grid

    Returns:
        Array (segments, 2, 1 + m) of segment end points in (x, y);
        isolated members appear as degenerate segments
    """
    smap = solution_map(P, xs)
    chains: Dict[int, List[Optional[np.ndarray]]] = {}
    for entry in smap.entries:
        for mem, branch in zip(entry.solution.members, entry.branches):
            point = np.r_[entry.x, mem.y]
            if kkt_only and not stationarity_status(P, entry.x, mem.y).is_kkt:
                point = None
            chains.setdefault(branch, []).append(point)

    segments = []
    for chain in chains.values():
        for k, point in enumerate(chain):
            if point is None:
                continue
            following = chain[k + 1] if k + 1 < len(chain) else None
            lonely = following is None and (k == 0 or chain[k - 1] is None)
            if following is not None:
                segments.append((point, following))
            elif lonely:
                segments.append((point, point))
    if not segments:
        return np.zeros((0, 2, P.m + 1))
    return np.array(segments)


def segment_distance(point: np.ndarray, segments: np.ndarray) -> float:
    if segments.shape[0] == 0:
        return float("inf")
    A, B = segments[:, 0, :], segments[:, 1, :]
    d = B - A
    length2 = np.sum(d * d, axis=1)
    t = np.sum((point - A) * d, axis=1) / np.where(length2 > 0, length2, 1.0)
    t = np.clip(np.where(length2 > 0, t, 0.0), 0.0, 1.0)
    return float(np.min(np.linalg.norm(point - (A + t[:, None] * d), axis=1)))


def uwsm_ratio(P: BilevelProblem, x: float, y: Sequence[float]) -> Optional[Tuple[float, float, float]]:
    """(dist_{S(x)}(y), f - V, ratio); None when V(x) is inconclusive"""
    return _ratio(P, x, y, solution_distance(P, x, y))


def peb_ratio(P: BilevelProblem, x: float, y: Sequence[float],
              segments: np.ndarray) -> Optional[Tuple[float, float, float]]:
    """(dist_{K(0)}(x, y), f - V, ratio) with K(0) given by minimizer polylines"""
    return _ratio(P, x, y, segment_distance(np.r_[x, y], segments))


def _ratio(P: BilevelProblem, x: float, y, numerator: float) -> Optional[Tuple[float, float, float]]:
    gap = lower_gap(P, x, y)
    if gap is None:
        return None
    if numerator <= ZERO_DISTANCE:
        return numerator, gap, 0.0
    if gap <= ZERO_GAP:
        return numerator, gap, float("inf")
    return numerator, gap, numerator / gap


def _estimate(P: BilevelProblem, pool: SamplePool, kind: str, condition: str, v_max: float,
              ratio_fn) -> PEBReport:
    tracer = SampleTracer(P.m)
    tracer.reset(f"{kind}:{condition}")
    level_sups = [0.0] * LEVELS
    half_sup = 0.0
    at_zero = 0
    for s in pool.select(condition):
        evaluated = ratio_fn(s.x, s.y)
        if evaluated is None:
            tracer.track_drop(s.x, s.y, "value function inconclusive")
            continue
        numerator, gap, ratio = evaluated
        if gap <= ZERO_GAP:
            at_zero += 1
            continue
        if gap > v_max:
            tracer.track_drop(s.x, s.y, "gap above v_max")
            continue
        tracer.track_sample(s.x, s.y, s.level, s.origin, numerator=numerator, denominator=gap, ratio=ratio)
        for level in range(s.level, LEVELS):
            level_sups[level] = max(level_sups[level], ratio)
        if np.linalg.norm(np.r_[s.x - pool.x_bar, s.y - pool.y_bar]) <= pool.radius / 2:
            half_sup = max(half_sup, ratio)

    modulus = level_sups[-1]
    if modulus == 0.0:
        verdict = NUMERATOR_ZERO
    elif not np.isfinite(modulus) or (level_sups[0] > 0 and modulus >= GROWTH_FACTOR * level_sups[0]):
        verdict = UNBOUNDED_SUSPECT
    else:
        verdict = HOLDS_WITH_L
    worst = tracer.worst("ratio")
    logger.info(f"{kind.upper()} over Sigma_{condition}: L = {modulus:.6g} ({verdict}), "
                f"level sups {[round(v, 6) for v in level_sups]}, {tracer.get_trace_report()['summary']}")
    return PEBReport(kind, condition, pool.radius, v_max, len(tracer.samples), modulus, verdict,
                     level_sups, half_sup, worst, len(tracer.dropped), at_zero, tracer)


def estimate_peb_modulus(P: BilevelProblem, x_bar: float, y_bar: Sequence[float], radius: float,
                         v_max: float = 1.0, samples: int = 200, condition: str = FJ,
                         seed: int = 0, pool: Optional[SamplePool] = None) -> PEBReport:
    """
    Estimate L in dist_{K(0)}(x, y) <= L |v| over Sigma_condition ∩ U

    K(0) is approximated by polylines through the global minimizers on
    the sampling grid (restricted to KKT members for the KKT and
    B-surrogate conditions).

    Args:
        pool: Reuse a sample pool so several conditions see identical samples
    """
    _check_condition(condition, CONDITIONS)
    if pool is None:
        pool = sample_stationary_points(P, x_bar, y_bar, radius, samples, seed, rays=condition == F_SET)
    segments = minimizer_segments(P, pool.xs, kkt_only=condition in (KKT, B_SURROGATE))
    report = _estimate(P, pool, "peb", condition, v_max, lambda x, y: peb_ratio(P, x, y, segments))
    report.segments = segments
    return report


def estimate_uwsm_modulus(P: BilevelProblem, x_bar: float, y_bar: Sequence[float], radius: float,
                          samples: int = 200, condition: str = F_SET, v_max: float = float("inf"),
                          seed: int = 0, pool: Optional[SamplePool] = None) -> PEBReport:
    """Estimate L in dist_{S(x)}(y) <= L (f(x, y) - V(x)) over Sigma_condition ∩ U"""
    _check_condition(condition, CONDITIONS)
    if pool is None:
        pool = sample_stationary_points(P, x_bar, y_bar, radius, samples, seed, rays=condition == F_SET)
    return _estimate(P, pool, "uwsm", condition, v_max, lambda x, y: uwsm_ratio(P, x, y))


def verify_fj_equals_min(P: BilevelProblem, x_bar: float, y_bar: Sequence[float], radius: float,
                         samples: int = 200, seed: int = 0) -> float:
    """
    Max of dist_{S(x)}(y) over sampled FJ points near a Case-I point

    Raises:
        PreconditionError: the point is not Case I
        InconclusiveError: no FJ point was sampled
    """
    classification = classify_simplicity(P, x_bar, y_query=y_bar)
    if classification.case != CASE_I:
        raise PreconditionError(
            f"FJ points coincide with global minimizers only in Case I; "
            f"(x={x_bar}) is {classification.case}"
        )
    pool = sample_stationary_points(P, x_bar, y_bar, radius, samples, seed)
    fj = pool.select(FJ)
    if not fj:
        raise InconclusiveError(f"No FJ point sampled within radius {radius} of (x={x_bar})")
    distances = []
    for s in fj:
        solution = solve_lower_global(P, s.x)
        if solution.inconclusive or not solution.feasible:
            continue
        distances.append(solution_distance(P, s.x, s.y))
    if not distances:
        raise InconclusiveError("Value function inconclusive at every sampled FJ point")
    worst = float(max(distances))
    logger.info(f"Sigma_FJ vs M at x={x_bar}: {len(distances)} FJ samples, max distance {worst:.3e}")
    return worst


def verify_partial_calmness(P: BilevelProblem, x_bar: float, y_bar: Sequence[float], mu: float,
                            radius: float, samples: int = 200, condition: str = FJ,
                            seed: int = 0, pool: Optional[SamplePool] = None) -> CalmnessReport:
    """
    Min of F + mu (f - V) - F(x_bar, y_bar) over sampled Sigma ∩ U

    Holds iff the minimum is >= -tau_res. Samples violating the upper
    constraints are dropped.
    """
    _check_condition(condition, CALMNESS_CONDITIONS)
    if mu < 0:
        raise PreconditionError(f"Penalty parameter must be nonnegative, got {mu}")
    if pool is None:
        pool = sample_stationary_points(P, x_bar, y_bar, radius, samples, seed)
    y_bar = np.asarray(y_bar, dtype=float)
    F_bar = float(P.F.value(x_bar, y_bar))
    tracer = SampleTracer(P.m)
    tracer.reset(f"calmness:{condition}")
    for s in pool.select(condition):
        gap = lower_gap(P, s.x, s.y)
        if gap is None:
            tracer.track_drop(s.x, s.y, "value function inconclusive")
            continue
        if P.q and not upper_feasible(P, s.x, s.y):
            tracer.track_drop(s.x, s.y, "upper-level infeasible")
            continue
        F = float(P.F.value(s.x, s.y))
        tracer.track_sample(s.x, s.y, s.level, s.origin, F=F, gap=gap, penalized=F + mu * gap - F_bar)

    witness = tracer.worst("penalized", largest=False)
    minimum = witness["penalized"] if witness else float("inf")
    verdict = HOLDS if minimum >= -P.tol.res else FAILS
    logger.info(f"Partial calmness over Sigma_{condition} with mu={mu:g}: min {minimum:.6g} ({verdict})")
    return CalmnessReport(float(mu), condition, float(radius), len(tracer.samples), minimum, verdict,
                          witness, len(tracer.dropped), tracer)


def lipschitz_bound(P: BilevelProblem, x_bar: float, y_bar: Sequence[float], radius: float,
                    samples: int = 256, seed: int = 0) -> float:
    """Max |grad F| over the candidate and random points of the (x, y)-ball"""
    rng = np.random.default_rng(seed)
    center = np.r_[x_bar, np.asarray(y_bar, dtype=float)]
    d = P.m + 1
    directions = rng.normal(size=(samples, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    scales = radius * rng.uniform(size=(samples, 1)) ** (1.0 / d)
    bound = 0.0
    for z in np.vstack([center, center + scales * directions]):
        try:
            bound = max(bound, float(np.linalg.norm(P.F.grad(z[0], z[1:]))))
        except ExprDomainError:
            continue
    return bound
