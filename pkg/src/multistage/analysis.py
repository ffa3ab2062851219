"""Mean queueing time of the Gittins policy for an M/G/1 queue of multistage jobs.

Everything is expressed through SJP functions.  With ``A_s(r) = r - V_s(r)``
(expected time to clear a job in state ``s`` when bypassing is worth ``r``):

* ``rho(r) = lam * A_a(r)`` is the bypass-adjusted load of a fresh job,
* ``w(r) = r / (1 - rho(r))``,
* ``C_B(r; s) = A_s(r) / (1 - rho(r))``,

and the mean queueing time is the double integral over stage ages ``x`` and
rewards ``r`` of ``lam q_i Fbar_i(x) C_B'(r; (i,x)) C_B'(r; a) / w'(r)``.
The r-integrand is rational between breakpoints, so both integrals use
Gauss-Legendre rules on pieces where the integrand is smooth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import QuadratureBudgetExceeded, Unstable
from .model import JobType, condition_stage, expected_total_size, reach_prob
from .pwl import PwlFunction, pwl_compose
from .sjp import _tails, downstream_functions, sjp_single_stage

MAX_LOAD = 0.999
SLOPE_DIGITS = 9
POSITION_TOL = 1e-9
KINK_TOL = 1e-12


# -- single-job quantities -------------------------------------------------

def cost_a(v: PwlFunction, r: float) -> float:
    """Expected time to clear one job that may be bypassed at reward ``r``."""
    return r - v(r)


def prevailing_tail(v: PwlFunction, r: float) -> float:
    """``P(R > r)`` for the prevailing index ``R``: one minus the right slope."""
    return 1.0 - v.slope_at(r)


def _pieces(*fns: PwlFunction) -> np.ndarray:
    """Sorted union of 0 and all breakpoints: the r-pieces where every slope is constant."""
    pts = {0.0}
    for f in fns:
        pts.update(f.breakpoints)
    return np.array(sorted(pts))


def interference_no_arrivals(v1: PwlFunction, v2: PwlFunction) -> float:
    """Expected queueing time the optimal two-job schedule (no arrivals) incurs.

    Equals ``E[min(R_1, R_2)]`` for independent prevailing indices, i.e. the
    integral of the product of the two tails.  Both tails are step functions,
    so the integral is an exact finite sum.
    """
    pts = _pieces(v1, v2)
    total = []
    for lo, hi in zip(pts[:-1], pts[1:]):
        total.append((1.0 - v1.slope_at(lo)) * (1.0 - v2.slope_at(lo)) * (hi - lo))
    return math.fsum(total)


# -- queue model -------------------------------------------------------------

@dataclass(frozen=True)
class QueueModel:
    job: JobType
    lam: float
    r_nodes: int = 16
    x_nodes: int = 32
    max_pieces: int = 4096  # x-pieces per support interval before giving up

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"arrival rate must be nonnegative, got {self.lam!r}")
        if self.r_nodes < 1 or self.x_nodes < 1:
            raise ValueError("quadrature needs at least one node per piece")

    @property
    def load(self) -> float:
        return self.lam * expected_total_size(self.job)

    @classmethod
    def from_load(cls, job: JobType, rho: float, **kwargs) -> "QueueModel":
        return cls(job, rho / expected_total_size(job), **kwargs)


@dataclass(frozen=True)
class CostCurves:
    """Evaluators for ``rho``, ``w`` and ``C_B`` built from a fresh job's SJP function."""

    v_init: PwlFunction
    lam: float

    def __post_init__(self):
        load = self.lam * self.v_init.mean_size
        if not load < 1.0:
            raise Unstable(f"load {load:.6g} is not below 1")
        if load > MAX_LOAD:
            raise Unstable(f"load {load:.6g} exceeds the evaluation limit {MAX_LOAD}")

    def rho(self, r):
        r = np.asarray(r, dtype=float)
        return self.lam * (r - self.v_init.eval_many(r))

    def w(self, r):
        r = np.asarray(r, dtype=float)
        return r / (1.0 - self.rho(r))

    def w_prime(self, r):
        r = np.asarray(r, dtype=float)
        one_minus = 1.0 - self.rho(r)
        da = 1.0 - self.v_init.slope_many(r)
        return (one_minus + self.lam * r * da) / one_minus**2

    def cost_b(self, v: PwlFunction, r):
        r = np.asarray(r, dtype=float)
        return (r - v.eval_many(r)) / (1.0 - self.rho(r))

    def cost_b_prime(self, v: PwlFunction, r):
        """Right derivative of ``C_B(r; s)`` in ``r``, using exact PWL slopes."""
        r = np.asarray(r, dtype=float)
        one_minus = 1.0 - self.rho(r)
        a_s = r - v.eval_many(r)
        da_s = 1.0 - v.slope_many(r)
        da_a = 1.0 - self.v_init.slope_many(r)
        return (da_s * one_minus + self.lam * a_s * da_a) / one_minus**2

    def tail_ratio(self, v: PwlFunction, r):
        """``C_B'(r; s) / w'(r)``: a tail function of ``r`` for every state ``s``."""
        return self.cost_b_prime(v, r) / self.w_prime(r)

    def integrand(self, v: PwlFunction, r: np.ndarray) -> np.ndarray:
        """``C_B'(r; s) C_B'(r; a) / w'(r)`` for the state with SJP function ``v``."""
        one_minus = 1.0 - self.lam * (r - self.v_init.eval_many(r))
        a_s = r - v.eval_many(r)
        da_s = 1.0 - v.slope_many(r)
        da_a = 1.0 - self.v_init.slope_many(r)
        return ((da_s * one_minus + self.lam * a_s * da_a) * da_a
                / (one_minus**2 * (one_minus + self.lam * r * da_a)))


def build_cost_curves(m: QueueModel) -> CostCurves:
    stage_v, _ = downstream_functions(m.job)
    return CostCurves(stage_v[m.job.initial], m.lam)


@lru_cache(maxsize=None)
def _gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return nodes, weights


def _gl_nodes(edges: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on every piece between consecutive edges."""
    t, wt = _gauss_legendre(n)
    lo, hi = edges[:-1, None], edges[1:, None]
    half = 0.5 * (hi - lo)
    return (lo + half * (t + 1.0)).ravel(), (half * wt).ravel()


def r_integral(curves: CostCurves, v: PwlFunction, r_nodes: int = 16) -> float:
    """Inner integral over ``r`` for one state.

    Past the last breakpoint of both ``v`` and ``v_init`` both clearing-time
    slopes vanish, so the integrand is zero there and the domain is finite.
    """
    edges = _pieces(v, curves.v_init)
    r, wt = _gl_nodes(edges, r_nodes)
    return float(np.dot(wt, curves.integrand(v, r)))


# -- outer integral over ages ------------------------------------------------

@dataclass
class _StageIntegrator:
    curves: CostCurves
    dist: object
    downstream: PwlFunction
    r_nodes: int
    evaluations: int = field(default=0)

    def state_v(self, x: float) -> PwlFunction:
        single = sjp_single_stage(condition_stage(self.dist, x))
        return pwl_compose(single, self.downstream)

    def signature(self, x: float) -> tuple:
        """Discrete shape of ``V_(i,x)`` relative to ``v_init``.

        Within an age range where this is constant, every breakpoint moves
        linearly in ``x`` and no breakpoint crosses one of ``v_init``, so the
        r-integral is smooth in ``x``.
        """
        v = self.state_v(x)
        ref = np.asarray(self.curves.v_init.breakpoints)
        b = np.asarray(v.breakpoints)
        pos = np.searchsorted(ref, b)
        near = np.zeros(len(b), dtype=bool)
        for k, p in enumerate(pos):
            for q in (p - 1, p):
                if 0 <= q < len(ref) and abs(ref[q] - b[k]) <= POSITION_TOL:
                    near[k] = True
        return (tuple(round(s, SLOPE_DIGITS) for s in v.slopes), tuple(pos), tuple(near))

    def value(self, x: float) -> float:
        self.evaluations += 1
        return r_integral(self.curves, self.state_v(x), self.r_nodes)

    def change_points(self, lo: float, hi: float, probes: int = 16) -> list[float]:
        """Ages in ``(lo, hi)`` where the signature changes, located by bisection."""
        grid = lo + (hi - lo) * (np.arange(probes + 1) + 0.5) / (probes + 1)
        sigs = [self.signature(float(x)) for x in grid]
        cuts = []
        for a, b, sa, sb in zip(grid[:-1], grid[1:], sigs[:-1], sigs[1:]):
            if sa == sb:
                continue
            a, b = float(a), float(b)
            while b - a > KINK_TOL * max(1.0, abs(b)):
                mid = 0.5 * (a + b)
                if mid <= a or mid >= b:
                    break
                if self.signature(mid) == sa:
                    a = mid
                else:
                    b = mid
            cuts.append(0.5 * (a + b))
        return cuts


def _stage_contribution(curves: CostCurves, job: JobType, stage: str, downstream: PwlFunction,
                        m: QueueModel) -> float:
    dist = job.pmf(stage)
    tails = _tails(dist)
    integ = _StageIntegrator(curves, dist, downstream, m.r_nodes)
    xs = (0.0,) + dist.sizes
    parts = []
    for k in range(len(dist.sizes)):
        lo, hi = xs[k], xs[k + 1]
        edges = np.array([lo, *integ.change_points(lo, hi), hi])
        if len(edges) - 1 > m.max_pieces:
            raise QuadratureBudgetExceeded(
                f"stage {stage!r}: {len(edges) - 1} smooth pieces on [{lo}, {hi}]")
        x, wt = _gl_nodes(edges, m.x_nodes)
        vals = np.array([integ.value(float(xi)) for xi in x])
        parts.append(tails[k] * float(np.dot(wt, vals)))
    return math.fsum(parts)


def stage_contributions(m: QueueModel) -> dict[str, float]:
    """Per-stage terms of the mean queueing time, in topological stage order."""
    job = m.job
    if m.lam == 0.0:
        return {s: 0.0 for s in job.nonfinal}
    stage_v, downstream = downstream_functions(job)
    curves = CostCurves(stage_v[job.initial], m.lam)
    q = reach_prob(job)
    out = {}
    for s in job.order:
        if s == job.final:
            continue
        if job.is_zero(s):
            out[s] = 0.0  # a zero-size head is never in service for positive time
            continue
        out[s] = m.lam * q[s] * _stage_contribution(curves, job, s, downstream[s], m)
    return out


def mean_queueing_time_gittins(m: QueueModel) -> float:
    return math.fsum(stage_contributions(m).values())


def mean_response_time(m: QueueModel) -> float:
    return mean_queueing_time_gittins(m) + expected_total_size(m.job)
