"""Single-job profit (SJP) functions and the Gittins index of multistage jobs.

The SJP function ``V(r)`` of a job is the best expected profit when serving
it alone against completion reward ``r``, with the option to give up at any
time.  Its first breakpoint is the job's SJP index ("fair" reward); the
Gittins index is the reciprocal.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, MutableMapping, Sequence

from .errors import DegenerateJob
from .model import JobState, JobType, Pmf, condition_stage
from .pwl import PwlFunction, canonical, pwl_compose, pwl_inverse, pwl_mix


@dataclass(frozen=True)
class IndexValue:
    fair: float
    gittins: float

    @classmethod
    def from_fair(cls, fair: float) -> "IndexValue":
        if not fair > 0:
            raise DegenerateJob(f"SJP index {fair!r} is not positive (zero-size job)")
        return cls(fair, 1.0 / fair)


def _tails(dist: Pmf) -> list[float]:
    """``P(X > x_k)`` for k = 0..n with ``x_0 = 0``, as suffix sums."""
    tails = [0.0] * (len(dist.probs) + 1)
    acc = 0.0
    for k in range(len(dist.probs) - 1, -1, -1):
        acc += dist.probs[k]
        tails[k] = acc
    tails[0] = 1.0
    return tails


def stopping_lines(dist: Pmf) -> list[tuple[float, float]]:
    """(slope, intercept) of the profit of "give up at age x_m", m = 0..n.

    Stopping at the m-th support point completes with probability
    ``P(X <= x_m)`` and costs ``E[min(X, x_m)]`` in expectation.
    """
    tails = _tails(dist)
    lines = [(0.0, 0.0)]
    cost = 0.0
    prev = 0.0
    for m, x in enumerate(dist.sizes):
        cost += tails[m] * (x - prev)
        prev = x
        lines.append((1.0 - tails[m + 1], -cost))
    return lines


def sjp_single_stage(dist: Pmf, stats: MutableMapping[str, int] | None = None) -> PwlFunction:
    """Upper envelope of the stopping lines, built with a monotone stack.

    Lines arrive sorted by slope, so each one is pushed and popped at most
    once: linear time in the support size.
    """
    lines = stopping_lines(dist)
    hull: list[tuple[float, float]] = []  # (slope, intercept)
    starts: list[float] = []  # r where each hull line takes over
    for a, c in lines:
        start = 0.0
        while hull:
            a0, c0 = hull[-1]
            if a <= a0:  # parallel after rounding: keep the higher line
                if c <= c0:
                    break
            else:
                start = (c0 - c) / (a - a0)
                if start > starts[-1]:
                    break
            hull.pop()
            starts.pop()
            start = 0.0
        if not hull or a > hull[-1][0]:
            hull.append((a, c))
            starts.append(start)
    if stats is not None:
        stats["segment_ops"] = stats.get("segment_ops", 0) + len(lines)
    return canonical(zip(starts, (a for a, _ in hull)))


def downstream_functions(job: JobType) -> tuple[dict[str, PwlFunction], dict[str, PwlFunction]]:
    """Per-stage SJP functions at age 0 and the mixture of their successors.

    Returns ``(stage_v, downstream)`` where ``stage_v[i]`` is the SJP function
    of a job entering stage ``i`` and ``downstream[i]`` mixes ``stage_v`` over
    ``i``'s successors with the transition probabilities.
    """
    stage_v: dict[str, PwlFunction] = {job.final: PwlFunction.identity()}
    downstream: dict[str, PwlFunction] = {}
    for s in reversed(job.order):
        if s == job.final:
            continue
        mix = pwl_mix([(p, stage_v[t]) for t, p in job.successors(s)])
        downstream[s] = mix
        stage_v[s] = mix if job.is_zero(s) else pwl_compose(sjp_single_stage(job.pmf(s)), mix)
    return stage_v, downstream


def sjp_of_job(job: JobType) -> PwlFunction:
    """SJP function of a fresh job, one composition per stage in reverse order."""
    stage_v, _ = downstream_functions(job)
    return stage_v[job.initial]


def sjp_chain(stages: Sequence[Pmf], stats: MutableMapping[str, int] | None = None) -> PwlFunction:
    """SJP function of a fixed stage sequence by divide and conquer.

    Splits at the stage leaving at most half the support points on either
    side, recurses, and composes the three pieces: O(n log n) overall.
    """
    if not stages:
        raise ValueError("need at least one stage")
    singles = [sjp_single_stage(p, stats) for p in stages]
    counts = [len(p) for p in stages]
    prefix = [0]
    for c in counts:
        prefix.append(prefix[-1] + c)

    def solve(lo: int, hi: int) -> PwlFunction:
        if hi - lo == 1:
            return singles[lo]
        total = prefix[hi] - prefix[lo]
        pivot = lo
        while pivot < hi - 1 and prefix[pivot + 1] - prefix[lo] <= total / 2:
            pivot += 1
        # stages lo..pivot-1 carry at most half; so do pivot+1..hi-1
        v = singles[pivot]
        if pivot + 1 < hi:
            v = pwl_compose(v, solve(pivot + 1, hi), stats)
        if pivot > lo:
            v = pwl_compose(solve(lo, pivot), v, stats)
        return v

    return solve(0, len(stages))


def sjp_chain_sequential(stages: Sequence[Pmf], stats: MutableMapping[str, int] | None = None) -> PwlFunction:
    """Fold the chain from the back, one stage at a time (quadratic baseline)."""
    v = sjp_single_stage(stages[-1], stats)
    for p in reversed(stages[:-1]):
        v = pwl_compose(sjp_single_stage(p, stats), v, stats)
    return v


def fair_index(v: PwlFunction) -> IndexValue:
    return IndexValue.from_fair(v.breakpoints[0])


def fair_at_state(job: JobType, state: JobState,
                  downstream: Mapping[str, PwlFunction] | None = None) -> float:
    """SJP index of a job that is in ``state``."""
    if downstream is None:
        downstream = downstream_functions(job)[1]
    if job.is_zero(state.stage):
        return fair_index(downstream[state.stage]).fair
    single = sjp_single_stage(condition_stage(job.pmf(state.stage), state.age))
    return fair_index(pwl_compose(single, downstream[state.stage])).fair


def fair_at_age(dist: Pmf, age: float) -> float:
    """SJP index of a single-stage job of size ``dist`` that has age ``age``."""
    return fair_index(sjp_single_stage(condition_stage(dist, age))).fair


def stage_fair_indices(dist: Pmf) -> list[float]:
    """Index at each support age ``x_0 = 0, x_1, ..., x_{n-1}`` via one stack pass.

    ``fair_k = min_{m > k} (E_m - E_k) / (P(X > x_k) - P(X > x_m))``.  Sweeping
    k downward, the stack holds the candidates m that can still be the
    minimiser; a candidate is discarded as soon as a nearer one beats it, since
    the nearer one then also wins for every smaller k.
    """
    xs = (0.0,) + dist.sizes
    n = len(dist.sizes)
    tails = _tails(dist)
    costs = [0.0]
    for k in range(n):
        costs.append(costs[-1] + tails[k] * (xs[k + 1] - xs[k]))

    def ratio(k: int, m: int) -> float:
        return (costs[m] - costs[k]) / (tails[k] - tails[m])

    fair = [0.0] * n
    stack: list[int] = [n]
    for k in range(n - 1, -1, -1):
        # if k's best m lies beyond the top t, t's own ratio must be beaten by
        # continuing to t's minimiser; pop while that holds
        while len(stack) > 1 and ratio(k, stack[-1]) >= fair[stack[-1]]:
            stack.pop()
        m = stack[-1]
        fair[k] = ratio(k, m)
        stack.append(k)
    return fair
