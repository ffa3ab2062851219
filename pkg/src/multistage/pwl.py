"""Convex nondecreasing piecewise-linear functions on [0, inf).

A function is stored as ``((s_1, sigma_1), ..., (s_n, sigma_n))``: it is 0 on
``[0, s_1)``, has slope ``sigma_k`` on ``[s_k, s_{k+1})`` and slope 1 after
``s_n``.  Slopes are strictly increasing and the last one is exactly 1, so
every function here has the shape of a single-job profit curve.
"""
from __future__ import annotations

import heapq
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, MutableMapping, Sequence

import numpy as np

from .errors import NegativeReward, ProbabilityMismatch

MERGE_TOL = 1e-12
FINAL_SLOPE_TOL = 1e-9


@dataclass(frozen=True)
class PwlFunction:
    breakpoints: tuple[float, ...]
    slopes: tuple[float, ...]
    values: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        b = tuple(float(x) for x in self.breakpoints)
        s = tuple(float(x) for x in self.slopes)
        if not b or len(b) != len(s):
            raise ValueError("need matching, nonempty breakpoint and slope lists")
        if b[0] < 0:
            raise ValueError("breakpoints must be nonnegative")
        for k in range(1, len(b)):
            if not (b[k] > b[k - 1] and s[k] > s[k - 1]):
                raise ValueError("breakpoints and slopes must be strictly increasing")
        if not s[0] > 0 or s[-1] != 1.0:
            raise ValueError("slopes must lie in (0, 1] and end at exactly 1")
        vals = [0.0]
        for k in range(1, len(b)):
            vals.append(vals[-1] + s[k - 1] * (b[k] - b[k - 1]))
        object.__setattr__(self, "breakpoints", b)
        object.__setattr__(self, "slopes", s)
        object.__setattr__(self, "values", tuple(vals))

    @classmethod
    def identity(cls) -> "PwlFunction":
        return cls((0.0,), (1.0,))

    @classmethod
    def hinge(cls, d: float) -> "PwlFunction":
        """``max(0, r - d)``."""
        return cls((float(d),), (1.0,))

    @classmethod
    def from_segments(cls, segments: Iterable[Sequence[float]]) -> "PwlFunction":
        segs = list(segments)
        return cls(tuple(b for b, _ in segs), tuple(s for _, s in segs))

    def segments(self) -> list[tuple[float, float]]:
        return list(zip(self.breakpoints, self.slopes))

    def __len__(self) -> int:
        return len(self.breakpoints)

    def __call__(self, r: float) -> float:
        return pwl_eval(self, r)

    @property
    def fair(self) -> float:
        return self.breakpoints[0]

    @property
    def last_breakpoint(self) -> float:
        return self.breakpoints[-1]

    @property
    def mean_size(self) -> float:
        """``E[S]``: the function equals ``r - E[S]`` past its last breakpoint."""
        return self.breakpoints[-1] - self.values[-1]

    def slope_at(self, r: float) -> float:
        """Right derivative at ``r``."""
        k = bisect_right(self.breakpoints, r) - 1
        return 0.0 if k < 0 else self.slopes[k]

    def is_close(self, other: "PwlFunction", tol: float = 1e-9) -> bool:
        """Pointwise agreement within ``tol`` (checked at every breakpoint of both)."""
        pts = set(self.breakpoints) | set(other.breakpoints)
        pts.add(max(pts) + 1.0)
        return all(abs(self(r) - other(r)) <= tol for r in pts)

    # vectorised helpers for quadrature
    @cached_property
    def _arrays(self):
        return (np.asarray(self.breakpoints), np.asarray(self.slopes), np.asarray(self.values))

    def eval_many(self, r: np.ndarray) -> np.ndarray:
        b, s, v = self._arrays
        k = np.searchsorted(b, r, side="right") - 1
        kk = np.maximum(k, 0)
        out = v[kk] + s[kk] * (r - b[kk])
        return np.where(k < 0, 0.0, out)

    def slope_many(self, r: np.ndarray) -> np.ndarray:
        b, s, _ = self._arrays
        k = np.searchsorted(b, r, side="right") - 1
        return np.where(k < 0, 0.0, s[np.maximum(k, 0)])


def canonical(points: Iterable[tuple[float, float]]) -> PwlFunction:
    """Build a canonical function from (breakpoint, slope) pairs in r-order.

    Leading zero slopes are dropped, near-coincident breakpoints are collapsed
    and adjacent segments whose slopes agree to ``MERGE_TOL`` are merged.
    """
    b: list[float] = []
    s: list[float] = []
    for r, sl in points:
        if not b and sl <= MERGE_TOL:
            continue
        if b and r - b[-1] < MERGE_TOL:
            s[-1] = sl
            if len(s) > 1 and abs(s[-1] - s[-2]) < MERGE_TOL:
                b.pop()
                s.pop()
            continue
        if b and abs(sl - s[-1]) < MERGE_TOL:
            continue
        b.append(max(r, 0.0))
        s.append(sl)
    if not b or abs(s[-1] - 1.0) > FINAL_SLOPE_TOL:
        raise ValueError(f"function does not end with slope 1 (got {s[-1:]})")
    s[-1] = 1.0
    # snapping may have created an equal-slope neighbour
    while len(s) > 1 and s[-2] >= 1.0 - MERGE_TOL:
        s.pop(-2)
        b.pop()
    return PwlFunction(tuple(b), tuple(s))


def pwl_eval(v: PwlFunction, r: float) -> float:
    if r < 0:
        raise NegativeReward(f"reward must be nonnegative, got {r!r}")
    k = bisect_right(v.breakpoints, r) - 1
    if k < 0:
        return 0.0
    return v.values[k] + v.slopes[k] * (r - v.breakpoints[k])


def pwl_inverse(v: PwlFunction, u: float) -> float:
    """The r with V(r) = u; at u = 0 the largest such r (the first breakpoint)."""
    if u < 0:
        raise ValueError(f"profit level must be nonnegative, got {u!r}")
    if u == 0:
        return v.breakpoints[0]
    k = bisect_right(v.values, u) - 1
    return v.breakpoints[k] + (u - v.values[k]) / v.slopes[k]


def pwl_compose(outer: PwlFunction, inner: PwlFunction,
                stats: MutableMapping[str, int] | None = None) -> PwlFunction:
    """``outer o inner`` by a single merge pass over both breakpoint lists."""
    sb, ss, sv = inner.breakpoints, inner.slopes, inner.values
    tb, ts = outer.breakpoints, outer.slopes
    n, m = len(sb), len(tb)
    k = 0
    j = bisect_right(tb, 0.0) - 1  # outer segment holding inner's value 0
    out = [(sb[0], ss[0] * (ts[j] if j >= 0 else 0.0))]
    steps = 0
    while True:
        steps += 1
        next_in = sb[k + 1] if k + 1 < n else math.inf
        next_out = sb[k] + (tb[j + 1] - sv[k]) / ss[k] if j + 1 < m else math.inf
        if next_in == math.inf and next_out == math.inf:
            break
        if next_out < next_in - MERGE_TOL:
            j += 1
            r = next_out
        elif next_in < next_out - MERGE_TOL:
            k += 1
            r = next_in
        else:
            k += 1
            j += 1
            r = next_in
        out.append((r, ss[k] * (ts[j] if j >= 0 else 0.0)))
    if stats is not None:
        stats["segment_ops"] = stats.get("segment_ops", 0) + steps
    return canonical(out)


def pwl_mix(parts: Sequence[tuple[float, PwlFunction]],
            stats: MutableMapping[str, int] | None = None) -> PwlFunction:
    """Pointwise ``sum q_l V_l`` for probabilities ``q_l`` summing to 1."""
    if not parts:
        raise ProbabilityMismatch("a mixture needs at least one part")
    qs = [float(q) for q, _ in parts]
    if any(not (0 < q <= 1) for q in qs) or abs(math.fsum(qs) - 1.0) > 1e-12:
        raise ProbabilityMismatch(f"mixture probabilities {qs} do not sum to 1")
    if len(parts) == 1:
        return parts[0][1]
    streams = [
        [(b, idx, k) for k, b in enumerate(v.breakpoints)] for idx, (_, v) in enumerate(parts)
    ]
    current = [0.0] * len(parts)
    out: list[tuple[float, float]] = []
    steps = 0
    for b, idx, k in heapq.merge(*streams):
        steps += 1
        current[idx] = qs[idx] * parts[idx][1].slopes[k]
        total = math.fsum(current)
        if out and b - out[-1][0] < MERGE_TOL:
            out[-1] = (out[-1][0], total)
        else:
            out.append((b, total))
    if stats is not None:
        stats["segment_ops"] = stats.get("segment_ops", 0) + steps
    return canonical(out)


def bisect_root(v: PwlFunction, tol: float = 1e-10) -> float:
    """Largest r with V(r) = 0, found by plain bisection.

    Only used to cross-check the exact first-breakpoint extraction.
    """
    lo, hi = 0.0, 1.0
    while pwl_eval(v, hi) <= 0.0:
        lo, hi = hi, hi * 2.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if pwl_eval(v, mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)
