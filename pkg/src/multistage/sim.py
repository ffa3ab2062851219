"""Discrete-event simulation of a preempt-resume M/G/1 queue of multistage jobs.

Each job's stage path and stage sizes are drawn at arrival and hidden from
the policy.  The scheduler always serves the job with the smallest key
(ties to the earliest arrival):

* FCFS: the arrival number,
* BGP: the SJP index of the total-size distribution at the job's total age,
* MGP: the SJP index of the job at its (stage, stage age).

With discrete sizes an index can only jump at support points, and in
between the served job's index only improves, so decisions happen at
arrivals, support-point crossings and stage or job completions.  The event
loop runs in a numba kernel; :func:`priority_of` is the plain Python route
to the same priorities.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import stats as sps

from .model import JobState, JobType, Pmf, expected_total_size, total_size_pmf
from .sjp import _tails, downstream_functions, fair_at_age, fair_at_state

SIZE_TOL = 1e-9
INITIAL_CAPACITY = 1024


class PolicyKind(enum.IntEnum):
    FCFS = 0
    BGP = 1
    MGP = 2

    @classmethod
    def parse(cls, name: "str | PolicyKind") -> "PolicyKind":
        if isinstance(name, PolicyKind):
            return name
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise ValueError(f"unknown policy {name!r} (expected FCFS, BGP or MGP)") from None


@dataclass(frozen=True)
class SimConfig:
    lam: float
    jobs: int = 100_000
    warmup: int | None = None  # default: 20% of jobs
    seed: int = 0
    reps: int = 10

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("arrival rate must be nonnegative")
        if self.reps < 1:
            raise ValueError("need at least one replication")
        if not 0 <= self.warmup_jobs < self.jobs:
            raise ValueError("warmup must be smaller than the job count")

    @property
    def warmup_jobs(self) -> int:
        return self.jobs // 5 if self.warmup is None else self.warmup


@dataclass
class SimResult:
    policy: PolicyKind
    mean_T: float
    mean_TQ: float
    ci95: float  # half-width for mean_T across replications
    ci95_TQ: float
    mean_size: float
    rep_T: np.ndarray
    rep_TQ: np.ndarray
    rep_size: np.ndarray
    rep_L: np.ndarray  # time-average number in system over the measurement window
    rep_lam: np.ndarray  # measured arrival rate over the window
    violations: int = 0  # epochs where the server idled with jobs present
    accounting_errors: int = 0  # completions whose served work != sampled size
    completions: list = field(default_factory=list, repr=False)

    @property
    def mean_L(self) -> float:
        return float(np.mean(self.rep_L))


@dataclass
class SimJob:
    id: int
    arrival_time: float
    path: list[tuple[str, float]]
    current_stage_index: int = 0
    served_in_stage: float = 0.0
    total_served: float = 0.0

    @property
    def total_size(self) -> float:
        return math.fsum(s for _, s in self.path)

    @property
    def stage(self) -> str:
        return self.path[self.current_stage_index][0]


# -- tables shared by the Python and kernel routes ----------------------------

def _cumulative(probs) -> np.ndarray:
    cum = np.cumsum(np.asarray(probs, dtype=float))
    cum[-1] = 1.0
    return cum


def _fair_tables(dist: Pmf) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Support points with ``x_0 = 0``, ``E[min(X, x_k)]`` and ``P(X > x_k)``."""
    xs = np.array((0.0,) + dist.sizes)
    tails = np.array(_tails(dist))
    costs = np.zeros(len(xs))
    for k in range(1, len(xs)):
        costs[k] = costs[k - 1] + tails[k - 1] * (xs[k] - xs[k - 1])
    return xs, costs, tails


def _flatten(chunks, dtype=float):
    offsets = np.zeros(len(chunks) + 1, dtype=np.int64)
    for k, c in enumerate(chunks):
        offsets[k + 1] = offsets[k] + len(c)
    data = np.concatenate([np.asarray(c, dtype=dtype) for c in chunks]) if chunks else np.zeros(0, dtype)
    return offsets, data


@dataclass(frozen=True)
class JobTables:
    """Flat arrays describing a job type for the kernel."""

    names: tuple[str, ...]
    initial: int
    is_zero: np.ndarray
    size_off: np.ndarray
    sizes: np.ndarray
    size_cum: np.ndarray
    tr_off: np.ndarray
    tr_target: np.ndarray
    tr_cum: np.ndarray
    fx_off: np.ndarray  # per-stage index tables, n+1 entries each
    fx: np.ndarray
    fe: np.ndarray
    ft: np.ndarray
    d_off: np.ndarray  # per-stage downstream SJP function
    d_b: np.ndarray
    d_v: np.ndarray
    d_s: np.ndarray
    tot_x: np.ndarray  # total-size distribution (BGP)
    tot_e: np.ndarray
    tot_t: np.ndarray
    max_depth: int

    @classmethod
    def build(cls, job: JobType, with_total: bool = True) -> "JobTables":
        names = tuple(s for s in job.order if s != job.final)
        index = {s: k for k, s in enumerate(names)}
        index[job.final] = len(names)
        _, downstream = downstream_functions(job)
        sizes, cums, targets, tcums, fxs, fes, fts, dbs, dvs, dss = ([] for _ in range(10))
        for s in names:
            if job.is_zero(s):
                sizes.append([0.0])
                cums.append([1.0])
                fxs.append([0.0])
                fes.append([0.0])
                fts.append([1.0])
            else:
                d = job.pmf(s)
                sizes.append(d.sizes)
                cums.append(_cumulative(d.probs))
                xs, es, ts = _fair_tables(d)
                fxs.append(xs)
                fes.append(es)
                fts.append(ts)
            succ = job.successors(s)
            targets.append([index[t] for t, _ in succ])
            tcums.append(_cumulative([p for _, p in succ]))
            v = downstream[s]
            dbs.append(v.breakpoints)
            dvs.append(v.values)
            dss.append(v.slopes)
        size_off, size_flat = _flatten(sizes)
        _, cum_flat = _flatten(cums)
        tr_off, tr_flat = _flatten(targets, np.int64)
        _, tcum_flat = _flatten(tcums)
        fx_off, fx_flat = _flatten(fxs)
        _, fe_flat = _flatten(fes)
        _, ft_flat = _flatten(fts)
        d_off, db_flat = _flatten(dbs)
        _, dv_flat = _flatten(dvs)
        _, ds_flat = _flatten(dss)
        if with_total:
            tot_x, tot_e, tot_t = _fair_tables(total_size_pmf(job))
        else:
            tot_x, tot_e, tot_t = np.zeros(1), np.zeros(1), np.ones(1)
        return cls(
            names=names, initial=index[job.initial],
            is_zero=np.array([job.is_zero(s) for s in names], dtype=np.bool_),
            size_off=size_off, sizes=size_flat, size_cum=cum_flat,
            tr_off=tr_off, tr_target=tr_flat, tr_cum=tcum_flat,
            fx_off=fx_off, fx=fx_flat, fe=fe_flat, ft=ft_flat,
            d_off=d_off, d_b=db_flat, d_v=dv_flat, d_s=ds_flat,
            tot_x=tot_x, tot_e=tot_e, tot_t=tot_t,
            max_depth=job.depth(),
        )


def sample_job(job: JobType, rng: np.random.Generator, tables: JobTables | None = None) -> list[tuple[str, float]]:
    """Draw a stage path with one size per visited stage (zero-size head omitted).

    Draw order per stage: one uniform for the size (skipped for a zero-size
    stage), then one for the transition.  The kernel follows the same order,
    so both routes produce the same paths from the same stream.
    """
    t = tables or JobTables.build(job, with_total=False)
    final = len(t.names)
    s = t.initial
    path = []
    while s != final:
        if not t.is_zero[s]:
            lo, hi = t.size_off[s], t.size_off[s + 1]
            k = int(np.searchsorted(t.size_cum[lo:hi], rng.random(), side="right"))
            path.append((t.names[s], float(t.sizes[lo + min(k, hi - lo - 1)])))
        lo, hi = t.tr_off[s], t.tr_off[s + 1]
        k = int(np.searchsorted(t.tr_cum[lo:hi], rng.random(), side="right"))
        s = int(t.tr_target[lo + min(k, hi - lo - 1)])
    return path


def priority_of(policy: PolicyKind, job: JobType, sim_job: SimJob, caches: dict | None = None) -> float:
    """Priority of a job in the system; larger is served first."""
    policy = PolicyKind.parse(policy)
    caches = {} if caches is None else caches
    if policy is PolicyKind.FCFS:
        return -sim_job.arrival_time
    if policy is PolicyKind.BGP:
        if "total" not in caches:
            caches["total"] = total_size_pmf(job)
        return 1.0 / fair_at_age(caches["total"], sim_job.total_served)
    if "downstream" not in caches:
        caches["downstream"] = downstream_functions(job)[1]
    state = JobState(sim_job.stage, sim_job.served_in_stage)
    return 1.0 / fair_at_state(job, state, caches["downstream"])


# -- numba kernel ------------------------------------------------------------

@njit(cache=True)
def _fair(xs, es, ts, k, age, db, dv, ds):
    """SJP index at ``age`` with ``k`` support points survived, then mapped
    through the downstream function's inverse."""
    n = len(xs) - 1
    e_age = es[k] + ts[k] * (age - xs[k])
    best = np.inf
    for m in range(k + 1, n + 1):
        val = (es[m] - e_age) / (ts[k] - ts[m])
        if val < best:
            best = val
    j = len(dv) - 1
    while j > 0 and dv[j] > best:
        j -= 1
    return db[j] + (best - dv[j]) / ds[j]


@njit(cache=True)
def kernel_stage_fair(fx_off, fx, fe, ft, d_off, d_b, d_v, d_s, stage, k, age):
    a, b = fx_off[stage], fx_off[stage + 1]
    c, d = d_off[stage], d_off[stage + 1]
    return _fair(fx[a:b], fe[a:b], ft[a:b], k, age, d_b[c:d], d_v[c:d], d_s[c:d])


_IDENTITY_B = np.zeros(1)
_IDENTITY_V = np.zeros(1)
_IDENTITY_S = np.ones(1)


@njit(cache=True)
def _less(k1, i1, k2, i2):
    return k1 < k2 or (k1 == k2 and i1 < i2)


@njit(cache=True)
def _heap_push(hk, hi, hs, n, key, jid, slot):
    pos = n
    while pos > 0:
        parent = (pos - 1) >> 1
        if _less(key, jid, hk[parent], hi[parent]):
            hk[pos], hi[pos], hs[pos] = hk[parent], hi[parent], hs[parent]
            pos = parent
        else:
            break
    hk[pos], hi[pos], hs[pos] = key, jid, slot
    return n + 1


@njit(cache=True)
def _heap_pop(hk, hi, hs, n):
    slot = hs[0]
    n -= 1
    key, jid, last = hk[n], hi[n], hs[n]
    pos = 0
    while True:
        child = 2 * pos + 1
        if child >= n:
            break
        if child + 1 < n and _less(hk[child + 1], hi[child + 1], hk[child], hi[child]):
            child += 1
        if _less(hk[child], hi[child], key, jid):
            hk[pos], hi[pos], hs[pos] = hk[child], hi[child], hs[child]
            pos = child
        else:
            break
    if n > 0:
        hk[pos], hi[pos], hs[pos] = key, jid, last
    return slot, n


@njit(cache=True)
def _run(policy, lam, n_jobs, warmup, g_arr, g_path, capacity, n_record,
         initial, is_zero, size_off, sizes, size_cum, tr_off, tr_target, tr_cum,
         fx_off, fx, fe, ft, d_off, d_b, d_v, d_s, tot_x, tot_e, tot_t, max_depth):
    """One replication.  Returns (ok, stats, record_id, record_time)."""
    final = len(is_zero)
    depth = max(max_depth, 1)
    # job slots
    j_id = np.zeros(capacity, np.int64)
    j_arr = np.zeros(capacity)
    j_len = np.zeros(capacity, np.int64)
    j_stage = np.zeros((capacity, depth), np.int64)
    j_size = np.zeros((capacity, depth))
    j_pos = np.zeros(capacity, np.int64)
    j_age = np.zeros(capacity)
    j_k = np.zeros(capacity, np.int64)
    j_tot = np.zeros(capacity)
    j_served = np.zeros(capacity)
    j_tk = np.zeros(capacity, np.int64)
    free = np.arange(capacity - 1, -1, -1).astype(np.int64)
    n_free = capacity
    hk = np.zeros(capacity)
    hi = np.zeros(capacity, np.int64)
    hs = np.zeros(capacity, np.int64)
    n_heap = 0
    rec_id = np.full(n_record, -1, np.int64)
    rec_time = np.zeros(n_record)
    n_rec = 0
    # [sum_T, sum_TQ, sum_size, count, area, window, violations, acct_errors, arrivals_in_window]
    out = np.zeros(9)

    t = 0.0
    next_arr = g_arr.exponential(1.0 / lam)
    n_arrived = 0
    n_system = 0
    left = n_jobs - warmup
    cur = -1
    w_start = np.inf
    w_end = np.inf

    while left > 0:
        # time to the served job's next event and its kind
        dt = np.inf
        kind = 0  # 1 crossing, 2 stage completion, 3 job completion
        if cur >= 0:
            if policy == 0:
                dt = j_tot[cur] - j_served[cur]
                kind = 3
            elif policy == 1:
                nxt = tot_x[j_tk[cur] + 1]
                tot = j_tot[cur]
                if nxt >= tot - SIZE_TOL * max(1.0, tot):
                    dt = tot - j_served[cur]
                    kind = 3
                else:
                    dt = nxt - j_served[cur]
                    kind = 1
            else:
                st = j_stage[cur, j_pos[cur]]
                nxt = fx[fx_off[st] + j_k[cur] + 1]
                size = j_size[cur, j_pos[cur]]
                if nxt >= size:
                    dt = size - j_age[cur]
                    kind = 3 if j_pos[cur] + 1 == j_len[cur] else 2
                else:
                    dt = nxt - j_age[cur]
                    kind = 1
        job_first = cur >= 0 and t + dt <= next_arr
        t_new = t + dt if job_first else next_arr
        # Little's-law area over the measurement window
        lo = max(t, w_start)
        hi_ = min(t_new, w_end)
        if hi_ > lo:
            out[4] += n_system * (hi_ - lo)
        if job_first:
            t = t_new
            if kind == 3:
                j_served[cur] = j_tot[cur] if policy != 2 else j_served[cur] + dt
                if abs(j_served[cur] - j_tot[cur]) > SIZE_TOL * max(1.0, j_tot[cur]):
                    out[7] += 1
                jid = j_id[cur]
                if jid >= warmup and jid < n_jobs:
                    resp = t - j_arr[cur]
                    out[0] += resp
                    out[1] += resp - j_tot[cur]
                    out[2] += j_tot[cur]
                    out[3] += 1
                    left -= 1
                if n_rec < n_record:
                    rec_id[n_rec] = jid
                    rec_time[n_rec] = t
                    n_rec += 1
                free[n_free] = cur
                n_free += 1
                n_system -= 1
                cur = -1
            elif kind == 2:
                j_served[cur] += dt
                j_pos[cur] += 1
                j_age[cur] = 0.0
                j_k[cur] = 0
            else:
                if policy == 1:
                    j_tk[cur] += 1
                    j_served[cur] = tot_x[j_tk[cur]]
                else:
                    j_served[cur] += dt
                    j_k[cur] += 1
                    j_age[cur] = fx[fx_off[j_stage[cur, j_pos[cur]]] + j_k[cur]]
            # decide
            if cur >= 0 and n_heap > 0:
                if policy == 0:
                    key = float(j_id[cur])
                elif policy == 1:
                    key = _fair(tot_x, tot_e, tot_t, j_tk[cur], j_served[cur],
                                _IDENTITY_B, _IDENTITY_V, _IDENTITY_S)
                else:
                    st = j_stage[cur, j_pos[cur]]
                    key = kernel_stage_fair(fx_off, fx, fe, ft, d_off, d_b, d_v, d_s,
                                            st, j_k[cur], j_age[cur])
                if _less(hk[0], hi[0], key, j_id[cur]):
                    nxt_slot, n_heap = _heap_pop(hk, hi, hs, n_heap)
                    n_heap = _heap_push(hk, hi, hs, n_heap, key, j_id[cur], cur)
                    cur = nxt_slot
            elif cur < 0 and n_heap > 0:
                cur, n_heap = _heap_pop(hk, hi, hs, n_heap)
        else:
            if cur >= 0:
                d = t_new - t
                j_served[cur] += d
                j_age[cur] += d
            t = t_new
            if n_free == 0:
                return False, out, rec_id, rec_time
            n_free -= 1
            slot = free[n_free]
            jid = n_arrived
            n_arrived += 1
            n_system += 1
            if jid == warmup:
                w_start = t
            if jid == n_jobs - 1:
                w_end = t
            if jid >= warmup and jid < n_jobs:
                out[8] += 1
            # sample the path: size draw then transition draw per stage
            s = initial
            L = 0
            tot = 0.0
            while s != final:
                if not is_zero[s]:
                    u = g_path.random()
                    a, b = size_off[s], size_off[s + 1]
                    k = a
                    while k < b - 1 and size_cum[k] <= u:
                        k += 1
                    j_stage[slot, L] = s
                    j_size[slot, L] = sizes[k]
                    tot += sizes[k]
                    L += 1
                u = g_path.random()
                a, b = tr_off[s], tr_off[s + 1]
                k = a
                while k < b - 1 and tr_cum[k] <= u:
                    k += 1
                s = tr_target[k]
            j_id[slot] = jid
            j_arr[slot] = t
            j_len[slot] = L
            j_pos[slot] = 0
            j_age[slot] = 0.0
            j_k[slot] = 0
            j_tot[slot] = tot
            j_served[slot] = 0.0
            j_tk[slot] = 0
            if policy == 0:
                key_new = float(jid)
            elif policy == 1:
                key_new = _fair(tot_x, tot_e, tot_t, 0, 0.0, _IDENTITY_B, _IDENTITY_V, _IDENTITY_S)
            else:
                key_new = kernel_stage_fair(fx_off, fx, fe, ft, d_off, d_b, d_v, d_s,
                                            j_stage[slot, 0], 0, 0.0)
            if cur < 0:
                cur = slot
            else:
                if policy == 0:
                    key_cur = float(j_id[cur])
                elif policy == 1:
                    key_cur = _fair(tot_x, tot_e, tot_t, j_tk[cur], j_served[cur],
                                    _IDENTITY_B, _IDENTITY_V, _IDENTITY_S)
                else:
                    key_cur = kernel_stage_fair(fx_off, fx, fe, ft, d_off, d_b, d_v, d_s,
                                                j_stage[cur, j_pos[cur]], j_k[cur], j_age[cur])
                if _less(key_new, jid, key_cur, j_id[cur]):
                    n_heap = _heap_push(hk, hi, hs, n_heap, key_cur, j_id[cur], cur)
                    cur = slot
                else:
                    n_heap = _heap_push(hk, hi, hs, n_heap, key_new, jid, slot)
            next_arr = t + g_arr.exponential(1.0 / lam)
        if cur < 0 and n_heap > 0:
            out[6] += 1
    out[5] = w_end - w_start
    return True, out, rec_id[:n_rec], rec_time[:n_rec]


# -- drivers -----------------------------------------------------------------

def _streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    arr, path = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(arr)), np.random.Generator(np.random.PCG64(path))


def run_replication(tables: JobTables, policy: PolicyKind, lam: float, jobs: int, warmup: int,
                    seed: int, record: int = 0):
    """Run one replication; capacity doubles until every job fits."""
    capacity = INITIAL_CAPACITY
    while True:
        g_arr, g_path = _streams(seed)
        ok, out, rec_id, rec_time = _run(
            int(policy), float(lam), int(jobs), int(warmup), g_arr, g_path, capacity, int(record),
            tables.initial, tables.is_zero, tables.size_off, tables.sizes, tables.size_cum,
            tables.tr_off, tables.tr_target, tables.tr_cum,
            tables.fx_off, tables.fx, tables.fe, tables.ft,
            tables.d_off, tables.d_b, tables.d_v, tables.d_s,
            tables.tot_x, tables.tot_e, tables.tot_t, tables.max_depth,
        )
        if ok:
            return out, rec_id, rec_time
        capacity *= 2


def _half_width(values: np.ndarray) -> float:
    n = len(values)
    if n < 2:
        return math.nan
    return float(sps.t.ppf(0.975, n - 1) * np.std(values, ddof=1) / math.sqrt(n))


def simulate(job: JobType, cfg: SimConfig, policy: PolicyKind | str,
             tables: JobTables | None = None, record: int = 0) -> SimResult:
    """Replications use seeds ``seed, seed+1, ...``; each seed feeds separate
    arrival and path streams, so all policies see the same jobs."""
    policy = PolicyKind.parse(policy)
    if cfg.lam == 0.0:
        # no contention: every job is served on arrival
        size = expected_total_size(job)
        zeros = np.zeros(cfg.reps)
        return SimResult(policy, size, 0.0, 0.0, 0.0, size, zeros + size, zeros, zeros + size,
                         zeros, zeros)
    if tables is None:
        tables = JobTables.build(job, with_total=policy is PolicyKind.BGP)
    reps = []
    completions = []
    for rep in range(cfg.reps):
        out, rec_id, rec_time = run_replication(tables, policy, cfg.lam, cfg.jobs, cfg.warmup_jobs,
                                                cfg.seed + rep, record)
        reps.append(out)
        if record:
            completions.append((rec_id, rec_time))
    arr = np.array(reps)
    count = arr[:, 3]
    rep_T = arr[:, 0] / count
    rep_TQ = arr[:, 1] / count
    rep_size = arr[:, 2] / count
    rep_L = arr[:, 4] / arr[:, 5]
    rep_lam = (arr[:, 8] - 1) / arr[:, 5]
    return SimResult(
        policy=policy,
        mean_T=float(np.mean(rep_T)),
        mean_TQ=float(np.mean(rep_TQ)),
        ci95=_half_width(rep_T),
        ci95_TQ=_half_width(rep_TQ),
        mean_size=float(np.mean(rep_size)),
        rep_T=rep_T, rep_TQ=rep_TQ, rep_size=rep_size, rep_L=rep_L, rep_lam=rep_lam,
        violations=int(arr[:, 6].sum()),
        accounting_errors=int(arr[:, 7].sum()),
        completions=completions,
    )


SWEEP_COLUMNS = ("rho", "lambda", "policy", "mean_T", "mean_TQ", "ci95", "analytic_TQ")


def sweep(job: JobType, rho_grid, policies, cfg: SimConfig, analytic: bool = True) -> list[dict]:
    """Simulate every policy at every load; MGP rows also carry the analytic mean queueing time."""
    from .analysis import QueueModel, mean_queueing_time_gittins

    policies = [PolicyKind.parse(p) for p in policies]
    size = expected_total_size(job)
    tables = JobTables.build(job, with_total=PolicyKind.BGP in policies)
    rows = []
    for rho in rho_grid:
        if not 0 < rho < 1:
            raise ValueError(f"load {rho!r} is not in (0, 1)")
        lam = rho / size
        run_cfg = SimConfig(lam, cfg.jobs, cfg.warmup, cfg.seed, cfg.reps)
        for p in policies:
            res = simulate(job, run_cfg, p, tables)
            tq = math.nan
            if analytic and p is PolicyKind.MGP:
                tq = mean_queueing_time_gittins(QueueModel(job, lam))
            rows.append({"rho": rho, "lambda": lam, "policy": p.name, "mean_T": res.mean_T,
                         "mean_TQ": res.mean_TQ, "ci95": res.ci95, "analytic_TQ": tq})
    return rows
