"""Multistage job types: validated acyclic stage graphs with discrete stage sizes.

A job type is a map of stages.  Every non-final stage carries a finite
discrete size distribution (or, for a mixture head only, size zero) and a
list of outgoing transitions.  A job starts at ``initial`` at age 0, is
served until its stage size is exhausted, then jumps to a successor stage
and so on until it reaches ``final``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from graphlib import CycleError, TopologicalSorter
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .errors import (
    AgeBeyondSupport,
    BudgetExceeded,
    CyclicGraph,
    DuplicateStage,
    JobSpecError,
    NonpositiveSize,
    ProbabilityMismatch,
    UnreachableFinal,
)

PROB_TOL = 1e-12
SIZE_MERGE_TOL = 1e-9
DEFAULT_OUTCOME_BUDGET = 10**6
FINAL_NAME = "DONE"


def parse_probability(value) -> float:
    """Accept a number or an exact fraction string such as ``"2/3"``."""
    if isinstance(value, bool):
        raise ProbabilityMismatch(f"probability must be numeric, got {value!r}")
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ProbabilityMismatch(f"cannot parse probability {value!r}") from exc
    if isinstance(value, (int, float)):
        return float(value)
    raise ProbabilityMismatch(f"probability must be numeric, got {value!r}")


@dataclass(frozen=True)
class Pmf:
    """Finite discrete distribution over strictly positive sizes."""

    sizes: tuple[float, ...]
    probs: tuple[float, ...]

    def __post_init__(self):
        sizes = tuple(float(s) for s in self.sizes)
        probs = tuple(float(p) for p in self.probs)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "probs", probs)
        if not sizes:
            raise JobSpecError("a size distribution needs at least one support point")
        if len(sizes) != len(probs):
            raise JobSpecError("sizes and probabilities differ in length")
        for s in sizes:
            if not (s > 0) or math.isinf(s):
                raise NonpositiveSize(f"stage sizes must be finite and > 0, got {s!r}")
        for a, b in zip(sizes, sizes[1:]):
            if not a < b:
                raise JobSpecError(f"support points must be strictly increasing ({a!r}, {b!r})")
        for p in probs:
            if not (0 < p <= 1):
                raise ProbabilityMismatch(f"probabilities must lie in (0, 1], got {p!r}")
        if abs(math.fsum(probs) - 1.0) > PROB_TOL:
            raise ProbabilityMismatch(f"probabilities sum to {math.fsum(probs)!r}, not 1")

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence]) -> "Pmf":
        items = sorted((float(s), parse_probability(p)) for s, p in pairs)
        for (a, _), (b, _) in zip(items, items[1:]):
            if a == b:
                raise JobSpecError(f"support point {a!r} listed twice")
        return cls(tuple(s for s, _ in items), tuple(p for _, p in items))

    @classmethod
    def point(cls, size: float) -> "Pmf":
        return cls((float(size),), (1.0,))

    def __len__(self) -> int:
        return len(self.sizes)

    def pairs(self) -> list[tuple[float, float]]:
        return list(zip(self.sizes, self.probs))

    @property
    def max_size(self) -> float:
        return self.sizes[-1]

    @property
    def mean(self) -> float:
        return math.fsum(s * p for s, p in zip(self.sizes, self.probs))

    def tail(self, x: float) -> float:
        """P(X > x)."""
        return math.fsum(p for s, p in zip(self.sizes, self.probs) if s > x)

    def condition(self, age: float) -> "Pmf":
        return condition_stage(self, age)


class ZeroSize:
    """Size marker for a mixture head: the stage completes instantly."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "ZERO_SIZE"


class FinalMarker:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "FINAL"


ZERO_SIZE = ZeroSize()
FINAL = FinalMarker()

StageSize = Pmf | ZeroSize | FinalMarker


@dataclass(frozen=True)
class JobState:
    stage: str
    age: float = 0.0


@dataclass(frozen=True, eq=False)
class JobType:
    """Validated, immutable multistage job type.

    ``stages`` maps stage names to a :class:`Pmf`, :data:`ZERO_SIZE` or
    :data:`FINAL`; ``transitions`` maps every non-final stage to
    ``(target, probability)`` pairs.
    """

    name: str
    stages: Mapping[str, StageSize]
    initial: str
    final: str
    transitions: Mapping[str, tuple[tuple[str, float], ...]]
    order: tuple[str, ...] = field(init=False, repr=False)

    def __post_init__(self):
        stages = MappingProxyType(dict(self.stages))
        transitions = MappingProxyType(
            {k: tuple((t, float(p)) for t, p in v) for k, v in self.transitions.items()}
        )
        object.__setattr__(self, "stages", stages)
        object.__setattr__(self, "transitions", transitions)
        object.__setattr__(self, "order", _validate(self))

    # -- structure -----------------------------------------------------
    @property
    def nonfinal(self) -> tuple[str, ...]:
        return tuple(s for s in self.order if s != self.final)

    def successors(self, stage: str) -> tuple[tuple[str, float], ...]:
        return self.transitions.get(stage, ())

    def pmf(self, stage: str) -> Pmf:
        size = self.stages[stage]
        if not isinstance(size, Pmf):
            raise JobSpecError(f"stage {stage!r} has no size distribution")
        return size

    def is_zero(self, stage: str) -> bool:
        return self.stages[stage] is ZERO_SIZE

    def __len__(self) -> int:
        return len(self.stages)

    @property
    def support_count(self) -> int:
        return sum(len(s) for s in self.stages.values() if isinstance(s, Pmf))

    def depth(self) -> int:
        """Largest number of sized (non-zero, non-final) stages on any path."""
        best: dict[str, int] = {self.final: 0}
        for s in reversed(self.order):
            if s == self.final:
                continue
            own = 0 if self.is_zero(s) else 1
            best[s] = own + max(best[t] for t, _ in self.successors(s))
        return best[self.initial]

    def __repr__(self):
        return f"JobType({self.name!r}, stages={len(self.stages)})"


def _validate(job: JobType) -> tuple[str, ...]:
    stages, trans = job.stages, job.transitions
    if job.initial not in stages:
        raise JobSpecError(f"initial stage {job.initial!r} is not defined")
    if job.final not in stages or stages[job.final] is not FINAL:
        raise JobSpecError(f"final stage {job.final!r} must carry the final marker")
    if job.initial == job.final:
        raise JobSpecError("initial stage cannot be the final stage")
    for name, size in stages.items():
        if size is FINAL and name != job.final:
            raise JobSpecError(f"stage {name!r}: only the final stage may be final")
        if size is ZERO_SIZE and name != job.initial:
            raise JobSpecError(f"stage {name!r}: only the initial stage may have zero size")
        if not isinstance(size, (Pmf, ZeroSize, FinalMarker)):
            raise JobSpecError(f"stage {name!r}: unsupported size {size!r}")
    for name in trans:
        if name not in stages:
            raise JobSpecError(f"transitions given for undefined stage {name!r}")
    if trans.get(job.final):
        raise JobSpecError("the final stage cannot have outgoing transitions")

    graph: dict[str, list[str]] = {}
    for name in stages:
        if name == job.final:
            graph[name] = []
            continue
        out = trans.get(name, ())
        if not out:
            raise UnreachableFinal(f"stage {name!r} has no outgoing transitions")
        seen = set()
        for target, p in out:
            if target not in stages:
                raise JobSpecError(f"stage {name!r} transitions to undefined stage {target!r}")
            if target in seen:
                raise JobSpecError(f"stage {name!r} lists target {target!r} twice")
            seen.add(target)
            if not (0 < p <= 1):
                raise ProbabilityMismatch(
                    f"stage {name!r}: transition probability {p!r} to {target!r} not in (0, 1]"
                )
        total = math.fsum(p for _, p in out)
        if abs(total - 1.0) > PROB_TOL:
            raise ProbabilityMismatch(
                f"stage {name!r}: outgoing probabilities sum to {total!r}, not 1"
            )
        if stages[name] is ZERO_SIZE and job.final in seen:
            raise JobSpecError(f"zero-size stage {name!r} cannot lead directly to the final stage")
        graph[name] = [t for t, _ in out]

    # TopologicalSorter wants predecessors; feed the reversed edges.
    preds: dict[str, set[str]] = {name: set() for name in stages}
    for src, targets in graph.items():
        for t in targets:
            preds[t].add(src)
    try:
        order = tuple(TopologicalSorter(preds).static_order())
    except CycleError as exc:
        cycle = " -> ".join(exc.args[1]) if len(exc.args) > 1 else ""
        raise CyclicGraph(f"stage graph has a cycle {cycle}".strip()) from exc

    can_finish = {job.final}
    for name in reversed(order):
        if any(t in can_finish for t in graph[name]):
            can_finish.add(name)
    missing = [s for s in stages if s not in can_finish]
    if missing:
        raise UnreachableFinal(f"final stage unreachable from {missing}")
    return order


# -- construction ----------------------------------------------------------

class _PairsDict(dict):
    """dict that remembers the raw key/value pairs (for duplicate detection)."""

    def __init__(self, pairs):
        super().__init__(pairs)
        self.pairs = list(pairs)


def build_job_type(spec: Mapping) -> JobType:
    """Validate a raw stage-graph description and return a :class:`JobType`.

    ``spec`` follows the JSON job-spec layout: ``name``, ``initial`` and
    ``stages`` (stage name -> ``{"pmf": [[size, prob], ...]}`` or
    ``{"zero": true}``, plus ``"transitions": [[target, prob], ...]``).
    The target ``"DONE"`` names the final stage.
    """
    if not isinstance(spec, Mapping):
        raise JobSpecError("job spec must be an object")
    for key in ("initial", "stages"):
        if key not in spec:
            raise JobSpecError(f"job spec is missing {key!r}")
    raw_stages = spec["stages"]
    if isinstance(raw_stages, Mapping):
        pairs = getattr(raw_stages, "pairs", None) or list(raw_stages.items())
    else:
        pairs = [tuple(item) for item in raw_stages]
    stages: dict[str, StageSize] = {FINAL_NAME: FINAL}
    transitions: dict[str, list[tuple[str, float]]] = {}
    for name, body in pairs:
        name = str(name)
        if name in stages:
            raise DuplicateStage(f"stage {name!r} defined twice (or uses the reserved name)")
        if not isinstance(body, Mapping):
            raise JobSpecError(f"stage {name!r}: body must be an object")
        if body.get("zero"):
            if "pmf" in body:
                raise JobSpecError(f"stage {name!r}: give either 'pmf' or 'zero', not both")
            stages[name] = ZERO_SIZE
        elif "pmf" in body:
            try:
                stages[name] = Pmf.from_pairs(body["pmf"])
            except JobSpecError as exc:
                raise type(exc)(f"stage {name!r}: {exc}") from None
            except (TypeError, ValueError) as exc:
                raise JobSpecError(f"stage {name!r}: malformed pmf ({exc})") from None
        else:
            raise JobSpecError(f"stage {name!r}: needs 'pmf' or 'zero'")
        out = []
        for item in body.get("transitions", ()):
            try:
                target, prob = item
            except (TypeError, ValueError):
                raise JobSpecError(f"stage {name!r}: transition {item!r} is not [target, prob]") from None
            try:
                out.append((str(target), parse_probability(prob)))
            except ProbabilityMismatch as exc:
                raise ProbabilityMismatch(f"stage {name!r}: {exc}") from None
        transitions[name] = out
    return JobType(
        name=str(spec.get("name", "job")),
        stages=stages,
        initial=str(spec["initial"]),
        final=FINAL_NAME,
        transitions=transitions,
    )


def single_stage(pmf: Pmf | Sequence, name: str = "stage", job_name: str | None = None) -> JobType:
    """The job with one stage of the given size distribution."""
    if not isinstance(pmf, Pmf):
        pmf = Pmf.from_pairs(pmf)
    return JobType(
        name=job_name or name,
        stages={name: pmf, FINAL_NAME: FINAL},
        initial=name,
        final=FINAL_NAME,
        transitions={name: ((FINAL_NAME, 1.0),)},
    )


def deterministic(size: float, name: str | None = None) -> JobType:
    label = name or f"det{size:g}"
    return single_stage(Pmf.point(size), name=label)


def chain(pmfs: Sequence[Pmf], name: str = "chain") -> JobType:
    """Deterministic stage sequence ``s0 -> s1 -> ... -> DONE``."""
    if not pmfs:
        raise JobSpecError("a chain needs at least one stage")
    labels = [f"s{k}" for k in range(len(pmfs))]
    stages: dict[str, StageSize] = dict(zip(labels, pmfs))
    stages[FINAL_NAME] = FINAL
    trans = {a: ((b, 1.0),) for a, b in zip(labels, labels[1:] + [FINAL_NAME])}
    return JobType(name=name, stages=stages, initial=labels[0], final=FINAL_NAME, transitions=trans)


def job_type_to_spec(job: JobType) -> dict:
    """Inverse of :func:`build_job_type` (final stage renamed to ``DONE``)."""

    def target(t):
        return FINAL_NAME if t == job.final else t

    stages = {}
    for name in job.order:
        if name == job.final:
            continue
        size = job.stages[name]
        body: dict = {"zero": True} if size is ZERO_SIZE else {"pmf": [[s, p] for s, p in size.pairs()]}
        body["transitions"] = [[target(t), p] for t, p in job.successors(name)]
        stages[name] = body
    return {"name": job.name, "initial": job.initial, "stages": stages}


def load_job_spec_text(text: str) -> dict:
    return json.loads(text, object_pairs_hook=_PairsDict)


# -- job-type operations ---------------------------------------------------

def condition_stage(dist: Pmf, age: float) -> Pmf:
    """Distribution of ``X - age`` given ``X > age``."""
    if age < 0 or math.isnan(age):
        raise AgeBeyondSupport(f"age must be nonnegative, got {age!r}")
    if age >= dist.max_size:
        raise AgeBeyondSupport(f"age {age!r} is not below the largest support point {dist.max_size!r}")
    if age == 0:
        return dist
    keep = [(s - age, p) for s, p in zip(dist.sizes, dist.probs) if s > age]
    total = math.fsum(p for _, p in keep)
    return Pmf(tuple(s for s, _ in keep), tuple(p / total for _, p in keep))


def _reachable_from(job: JobType, start: str) -> set[str]:
    seen = {start}
    stack = [start]
    while stack:
        for t, _ in job.successors(stack.pop()):
            if t not in seen:
                seen.add(t)
                stack.append(t)
    return seen


def condition_job(job: JobType, state: JobState) -> JobType:
    """Job type whose fresh jobs behave like a ``job`` job in ``state``."""
    stage, age = state.stage, state.age
    if stage not in job.stages or stage == job.final:
        raise JobSpecError(f"cannot condition on stage {stage!r}")
    if job.is_zero(stage):
        if age != 0:
            raise AgeBeyondSupport(f"zero-size stage {stage!r} only has age 0")
        if stage == job.initial:
            return job
    if stage == job.initial and age == 0:
        return job
    size = job.stages[stage]
    if isinstance(size, Pmf):
        size = condition_stage(size, age)
    keep = _reachable_from(job, stage)
    stages = {s: (size if s == stage else job.stages[s]) for s in job.stages if s in keep}
    trans = {s: job.transitions[s] for s in job.transitions if s in keep}
    return JobType(
        name=f"{job.name}|({stage},{age:g})",
        stages=stages,
        initial=stage,
        final=job.final,
        transitions=trans,
    )


def _unique_renamer(taken: set[str], prefix: str):
    def rename(name: str) -> str:
        if name not in taken:
            taken.add(name)
            return name
        candidate = f"{prefix}.{name}"
        k = 2
        while candidate in taken:
            candidate = f"{prefix}.{name}#{k}"
            k += 1
        taken.add(candidate)
        return candidate

    return rename


def _entry_points(job: JobType, rename) -> list[tuple[str, float]]:
    """Where a fresh job actually starts, skipping a zero-size head."""
    if job.is_zero(job.initial):
        return [(rename(t), p) for t, p in job.successors(job.initial)]
    return [(rename(job.initial), 1.0)]


def sequential_compose(first: JobType, second: JobType, name: str | None = None) -> JobType:
    """Run ``first``; on its completion continue as a fresh ``second`` job."""
    taken: set[str] = set()
    stages: dict[str, StageSize] = {}
    trans: dict[str, tuple[tuple[str, float], ...]] = {}

    for s in first.stages:
        if s != first.final:
            taken.add(s)
    second_names = {s: _unique_renamer(taken, second.name)(s) for s in second.stages}
    rename2 = second_names.__getitem__
    entry = _entry_points(second, rename2)

    for s in first.order:
        if s == first.final:
            continue
        stages[s] = first.stages[s]
        out: dict[str, float] = {}
        for t, p in first.successors(s):
            if t == first.final:
                for e, q in entry:
                    out[e] = out.get(e, 0.0) + p * q
            else:
                out[t] = out.get(t, 0.0) + p
        trans[s] = tuple(out.items())
    skip_head = second.is_zero(second.initial)
    for s in second.order:
        if skip_head and s == second.initial:
            continue
        stages[rename2(s)] = second.stages[s]
        if s != second.final:
            trans[rename2(s)] = tuple((rename2(t), p) for t, p in second.successors(s))
    return JobType(
        name=name or f"({first.name}>{second.name})",
        stages=stages,
        initial=first.initial,
        final=rename2(second.final),
        transitions=trans,
    )


def mixture_compose(branches: Sequence[tuple[float, JobType]], name: str | None = None,
                    head: str = "start") -> JobType:
    """Zero-size head that branches to each component with its probability."""
    if not branches:
        raise ProbabilityMismatch("a mixture needs at least one branch")
    probs = [parse_probability(q) for q, _ in branches]
    for q in probs:
        if not (0 < q <= 1):
            raise ProbabilityMismatch(f"mixture probability {q!r} not in (0, 1]")
    if abs(math.fsum(probs) - 1.0) > PROB_TOL:
        raise ProbabilityMismatch(f"mixture probabilities sum to {math.fsum(probs)!r}, not 1")

    taken = {head, FINAL_NAME}
    stages: dict[str, StageSize] = {head: ZERO_SIZE, FINAL_NAME: FINAL}
    trans: dict[str, tuple[tuple[str, float], ...]] = {}
    head_out: dict[str, float] = {}
    used_prefixes: set[str] = set()
    for idx, ((_, job), q) in enumerate(zip(branches, probs)):
        prefix = job.name if job.name not in used_prefixes else f"{job.name}{idx}"
        used_prefixes.add(prefix)
        rename = _unique_renamer(taken, prefix)
        names = {s: (FINAL_NAME if s == job.final else None) for s in job.stages}
        for s in job.order:
            if s != job.final and not (job.is_zero(s) and s == job.initial):
                names[s] = rename(s)
        for e, p in _entry_points(job, names.__getitem__):
            head_out[e] = head_out.get(e, 0.0) + q * p
        for s in job.order:
            if names[s] is None or s == job.final:
                continue
            stages[names[s]] = job.stages[s]
            trans[names[s]] = tuple((names[t], p) for t, p in job.successors(s))
    trans[head] = tuple(head_out.items())
    label = name or "{" + ", ".join(f"{q:g}:{j.name}" for q, (_, j) in zip(probs, branches)) + "}"
    return JobType(name=label, stages=stages, initial=head, final=FINAL_NAME, transitions=trans)


# -- derived quantities ----------------------------------------------------

def reach_prob(job: JobType) -> dict[str, float]:
    """Probability that a fresh job ever enters each stage."""
    q = {s: 0.0 for s in job.stages}
    q[job.initial] = 1.0
    for s in job.order:
        for t, p in job.successors(s):
            q[t] += q[s] * p
    return q


def _stage_means(job: JobType) -> dict[str, float]:
    """Expected remaining total size on entering each stage at age 0."""
    e = {job.final: 0.0}
    for s in reversed(job.order):
        if s == job.final:
            continue
        own = 0.0 if job.is_zero(s) else job.pmf(s).mean
        e[s] = own + math.fsum(p * e[t] for t, p in job.successors(s))
    return e


def expected_total_size(job: JobType, state: JobState | None = None) -> float:
    """Expected remaining service of a job currently in ``state``."""
    means = _stage_means(job)
    if state is None:
        return means[job.initial]
    if state.stage == job.final:
        return 0.0
    if job.is_zero(state.stage):
        return means[state.stage]
    own = condition_stage(job.pmf(state.stage), state.age).mean
    return own + math.fsum(p * means[t] for t, p in job.successors(state.stage))


def _merge_sizes(items: list[tuple[float, float]]) -> list[tuple[float, float]]:
    items.sort()
    out: list[list[float]] = []
    for s, p in items:
        if out and s - out[-1][0] <= SIZE_MERGE_TOL:
            out[-1][1] += p
        else:
            out.append([s, p])
    return [(s, p) for s, p in out]


def total_size_pmf(job: JobType, budget: int = DEFAULT_OUTCOME_BUDGET) -> Pmf:
    """Exact distribution of a fresh job's total size."""
    entry: dict[str, list[tuple[float, float]]] = {s: [] for s in job.stages}
    entry[job.initial] = [(0.0, 1.0)]
    used = 0
    for s in job.order:
        if s == job.final:
            continue
        here = entry.pop(s)
        if not here:
            continue
        if job.is_zero(s):
            leaving = here
        else:
            pmf = job.pmf(s)
            used += len(here) * len(pmf)
            if used > budget:
                raise BudgetExceeded(
                    f"total-size enumeration of {job.name!r} exceeds {budget} outcomes"
                )
            leaving = _merge_sizes([(a + x, pa * px) for a, pa in here for x, px in pmf.pairs()])
        for t, p in job.successors(s):
            entry[t].extend((a, pa * p) for a, pa in leaving)
        for t, _ in job.successors(s):
            if t != job.final:
                entry[t] = _merge_sizes(entry[t])
    final = _merge_sizes(entry[job.final])
    total = math.fsum(p for _, p in final)
    if abs(total - 1.0) > SIZE_MERGE_TOL:
        raise ProbabilityMismatch(f"path probabilities of {job.name!r} sum to {total!r}")
    if abs(total - 1.0) <= PROB_TOL:
        total = 1.0  # keep exact stage probabilities when nothing was lost
    return Pmf(tuple(s for s, _ in final), tuple(p / total for _, p in final))
