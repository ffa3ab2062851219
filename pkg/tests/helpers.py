"""Random job generators and independent brute-force oracles for the tests."""
from __future__ import annotations

import heapq
import json
import math
from fractions import Fraction
from pathlib import Path

import numpy as np

from multistage.model import (JobType, Pmf, build_job_type, load_job_spec_text, FINAL_NAME)
from multistage.sim import PolicyKind, SimJob, _streams, priority_of, sample_job

SPECS = Path(__file__).resolve().parents[1] / "src" / "multistage" / "jobspecs"
S_PMF = Pmf((1.0, 12.0), (0.5, 0.5))


def load(name: str) -> JobType:
    return build_job_type(load_job_spec_text((SPECS / name).read_text()))


def random_pmf(rng: np.random.Generator, max_n: int = 8, max_size: float = 20.0) -> Pmf:
    n = int(rng.integers(1, max_n + 1))
    grid = np.arange(1, int(max_size * 4) + 1) / 4.0  # sizes in (0, max_size]
    sizes = np.sort(rng.choice(grid, n, replace=False))
    probs = rng.random(n) + 0.05
    probs /= probs.sum()
    probs[-1] = 1.0 - probs[:-1].sum()
    return Pmf(tuple(float(s) for s in sizes), tuple(float(p) for p in probs))


def random_job(rng: np.random.Generator, max_stages: int = 5, max_support: int = 4,
               name: str = "J") -> JobType:
    """Random acyclic stage graph; every stage may jump forward or finish."""
    k = int(rng.integers(1, max_stages + 1))
    names = [f"{name}{i}" for i in range(k)]
    stages = {}
    for i, s in enumerate(names):
        pmf = random_pmf(rng, max_support)
        targets = names[i + 1:] + [FINAL_NAME]
        m = int(rng.integers(1, len(targets) + 1))
        chosen = list(rng.choice(targets, m, replace=False))
        if i == 0 and k > 1 and names[1] not in chosen:
            chosen.append(names[1])
        w = rng.random(len(chosen)) + 0.1
        w /= w.sum()
        w[-1] = 1.0 - w[:-1].sum()
        stages[s] = {"pmf": [[x, p] for x, p in pmf.pairs()],
                     "transitions": [[t, float(p)] for t, p in zip(chosen, w)]}
    return build_job_type({"name": name, "initial": names[0], "stages": stages})


def brute_single_stage(dist: Pmf, r: np.ndarray) -> np.ndarray:
    """Best stopping-age policy: max over m of P(X <= x_m) r - E[min(X, x_m)]."""
    best = np.zeros_like(r)
    for x in dist.sizes:
        p_done = sum(p for s, p in zip(dist.sizes, dist.probs) if s <= x)
        cost = sum(p * min(s, x) for s, p in zip(dist.sizes, dist.probs))
        best = np.maximum(best, p_done * r - cost)
    return best


def brute_fair_at_age(dist: Pmf, age: float) -> float:
    """Minimum over stopping points of expected remaining cost per completion probability."""
    alive = [(s, p) for s, p in zip(dist.sizes, dist.probs) if s > age]
    tot = sum(p for _, p in alive)
    best = math.inf
    for x, _ in alive:
        p_done = sum(p for s, p in alive if s <= x) / tot
        cost = sum(p * (min(s, x) - age) for s, p in alive) / tot
        best = min(best, cost / p_done)
    return best


def exact_pmf_total(job: JobType) -> dict[Fraction, Fraction]:
    """Total size by explicit path enumeration with rational arithmetic."""
    out: dict[Fraction, Fraction] = {}

    def walk(s, size, prob):
        if s == job.final:
            out[size] = out.get(size, Fraction(0)) + prob
            return
        if job.is_zero(s):
            opts = [(Fraction(0), Fraction(1))]
        else:
            opts = [(Fraction(x), Fraction(p)) for x, p in job.pmf(s).pairs()]
        for x, px in opts:
            for t, pt in job.successors(s):
                walk(t, size + x, prob * px * Fraction(pt))

    walk(job.initial, Fraction(0), Fraction(1))
    return out


def reference_simulation(job: JobType, policy: PolicyKind, lam: float, n_jobs: int, seed: int):
    """Slow event simulation that recomputes every job's priority at every epoch.

    Uses the Python priority route and the same random streams as the kernel.
    Returns completion (job id, time) pairs in completion order.
    """
    from multistage.model import total_size_pmf

    g_arr, g_path = _streams(seed)
    caches: dict = {}
    total_support = total_size_pmf(job).sizes if policy is PolicyKind.BGP else ()
    t = 0.0
    next_arr = g_arr.exponential(1.0 / lam)
    n_arr = 0
    live: list[SimJob] = []
    done = []
    while len(done) < n_jobs:
        cur = None
        if live:
            cur = max(live, key=lambda j: (priority_of(policy, job, j, caches), -j.id))
        if cur is None:
            dt = math.inf
        else:
            stage_size = cur.path[cur.current_stage_index][1]
            dt = stage_size - cur.served_in_stage
            if policy is PolicyKind.MGP:
                pts = [x for x in job.pmf(cur.stage).sizes if x > cur.served_in_stage]
                dt = min(dt, pts[0] - cur.served_in_stage)
            elif policy is PolicyKind.BGP:
                pts = [x for x in total_support if x > cur.total_served + 1e-9]
                if pts:
                    dt = min(dt, pts[0] - cur.total_served)
        if cur is not None and t + dt <= next_arr:
            t += dt
            cur.served_in_stage += dt
            cur.total_served += dt
            for x in job.pmf(cur.stage).sizes:  # land exactly on the support point reached
                if abs(cur.served_in_stage - x) < 1e-9:
                    cur.served_in_stage = x
            for x in total_support:
                if abs(cur.total_served - x) < 1e-9:
                    cur.total_served = x
            if cur.served_in_stage >= cur.path[cur.current_stage_index][1] - 1e-12:
                cur.current_stage_index += 1
                cur.served_in_stage = 0.0
                if cur.current_stage_index == len(cur.path):
                    live.remove(cur)
                    done.append((cur.id, t))
        else:
            if cur is not None:
                cur.served_in_stage += next_arr - t
                cur.total_served += next_arr - t
            t = next_arr
            live.append(SimJob(n_arr, t, sample_job(job, g_path)))
            n_arr += 1
            next_arr = t + g_arr.exponential(1.0 / lam)
    return done


def spec_text(job: JobType) -> str:
    from multistage.model import job_type_to_spec
    return json.dumps(job_type_to_spec(job))


ACCEPTANCE_LINES: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    """Record and print one pass/fail line for an acceptance criterion."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
