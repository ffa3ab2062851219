import numpy as np
import pytest

from helpers import S_PMF, load, random_pmf, reference_simulation
from multistage.analysis import QueueModel, mean_queueing_time_gittins
from multistage.model import JobState, Pmf, deterministic, expected_total_size, single_stage
from multistage.sim import (JobTables, PolicyKind, SimConfig, SimJob, _streams, kernel_stage_fair,
                            priority_of, sample_job, simulate, sweep)
from multistage.sjp import downstream_functions, fair_at_state


def test_sample_job_paths():
    R = load("repair.json")
    g = np.random.default_rng(1)
    paths = [sample_job(R, g) for _ in range(30000)]
    assert all(p[0] == ("D", 1.0) for p in paths)
    easy = sum(p[1] == ("easy", 4.0) for p in paths) / len(paths)
    assert easy == pytest.approx(2 / 3, abs=3 * np.sqrt(2 / 9 / len(paths)))
    assert sample_job(deterministic(2, "stage"), g) == [("stage", 2.0)]


def test_sampled_total_mean():
    R = load("repair.json")
    g = np.random.default_rng(2)
    totals = np.array([sum(s for _, s in sample_job(R, g)) for _ in range(100_000)])
    assert abs(totals.mean() - 23 / 3) <= 3 * totals.std() / np.sqrt(len(totals))


def test_mixture_paths_skip_zero_head():
    F = load("fig4_mixture.json")
    g = np.random.default_rng(3)
    for _ in range(100):
        p = sample_job(F, g)
        assert len(p) == 3 and sum(s for _, s in p) in (5.0, 16.0)


def test_priority_examples():
    R = load("repair.json")
    fresh = SimJob(0, 0.0, [("D", 1.0), ("easy", 4.0)])
    assert priority_of(PolicyKind.MGP, R, fresh) == pytest.approx(2 / 11, abs=1e-12)
    assert priority_of(PolicyKind.BGP, R, fresh) == pytest.approx(1 / 7.5, abs=1e-12)
    later = SimJob(0, 0.0, [("D", 1.0), ("hard", 12.0)], current_stage_index=1,
                   served_in_stage=4.0, total_served=5.0)
    assert priority_of(PolicyKind.BGP, R, later) == pytest.approx(1 / 8, abs=1e-12)
    assert priority_of(PolicyKind.FCFS, R, SimJob(3, 2.5, [])) == -2.5


def test_kernel_priorities_match_python_route():
    g = np.random.default_rng(4)
    for name in ("repair.json", "fig4_mixture.json"):
        J = load(name)
        T = JobTables.build(J)
        _, down = downstream_functions(J)
        for si, s in enumerate(T.names):
            if J.is_zero(s):
                continue
            d = J.pmf(s)
            for _ in range(40):
                age = float(g.uniform(0, d.max_size))
                k = int(np.searchsorted(d.sizes, age, side="right"))
                got = kernel_stage_fair(T.fx_off, T.fx, T.fe, T.ft, T.d_off, T.d_b, T.d_v, T.d_s,
                                        si, k, age)
                assert got == pytest.approx(fair_at_state(J, JobState(s, age), down), rel=1e-12)


@pytest.mark.parametrize("policy", list(PolicyKind))
@pytest.mark.parametrize("name", ["repair.json", "fig4_mixture.json"])
def test_kernel_matches_reference_simulation(name, policy):
    J = load(name)
    lam = 0.8 / expected_total_size(J)
    ref = reference_simulation(J, policy, lam, 300, seed=11)
    res = simulate(J, SimConfig(lam, jobs=300, warmup=0, seed=11, reps=1), policy, record=300)
    ids, times = res.completions[0]
    n = min(len(ref), len(ids))
    assert n >= 250
    assert list(ids[:n]) == [i for i, _ in ref[:n]]
    assert np.allclose(times[:n], [t for _, t in ref[:n]], rtol=0, atol=1e-9)


def test_zero_arrival_rate():
    for p in PolicyKind:
        res = simulate(load("repair.json"), SimConfig(0.0, jobs=100, reps=2), p)
        assert res.mean_TQ == 0


@pytest.mark.parametrize("policy", list(PolicyKind))
def test_md1_simulation(policy):
    res = simulate(deterministic(1.0), SimConfig(0.5, jobs=100_000, reps=10), policy)
    assert abs(res.mean_TQ - 0.5) <= res.ci95_TQ


def test_determinism_and_result_identities():
    R = load("repair.json")
    cfg = SimConfig(0.09, jobs=20_000, reps=3, seed=5)
    a, b = simulate(R, cfg, "MGP"), simulate(R, cfg, "MGP")
    assert a.mean_T == b.mean_T and np.array_equal(a.rep_TQ, b.rep_TQ)
    assert a.mean_T == pytest.approx(a.mean_TQ + a.mean_size, abs=1e-9)
    assert a.violations == 0 and a.accounting_errors == 0


def lindley_busy_ends(job, lam, n, seed):
    """Epochs where the system empties; identical for every work-conserving policy."""
    g_arr, g_path = _streams(seed)
    t, ends, free = 0.0, [], 0.0
    for _ in range(n):
        t += g_arr.exponential(1.0 / lam)
        if t > free and free > 0:
            ends.append(free)
        free = max(free, t) + sum(x for _, x in sample_job(job, g_path))
    return np.array(ends), free


@pytest.mark.parametrize("policy", list(PolicyKind))
def test_work_conservation(policy):
    F = load("fig4_mixture.json")
    lam, n = 0.85 / 10.5, 3000
    ends, _ = lindley_busy_ends(F, lam, 2 * n, seed=7)
    res = simulate(F, SimConfig(lam, jobs=n, warmup=0, seed=7, reps=1), policy, record=n)
    ids, times = res.completions[0]
    g_arr, _ = _streams(7)
    arrivals = np.cumsum(g_arr.exponential(1.0 / lam, 2 * n))
    in_system = np.searchsorted(arrivals, times, side="right") - np.arange(1, len(times) + 1)
    empties = times[in_system == 0]
    want = ends[ends <= times[-1] + 1e-9]
    assert len(want) > 50
    np.testing.assert_allclose(empties, want, rtol=0, atol=1e-7)
    assert res.violations == 0 and res.accounting_errors == 0


def test_little_law():
    F = load("fig4_mixture.json")
    res = simulate(F, SimConfig(0.8 / 10.5, jobs=100_000, reps=10), "MGP")
    L = res.rep_L
    lw = res.rep_lam * res.rep_T
    half = 1.96 * np.std(L - lw, ddof=1) / np.sqrt(len(L)) + 1e-12
    assert abs(L.mean() - lw.mean()) <= 3 * max(half, res.ci95 * 0.8 / 10.5)


def test_bgp_equals_mgp_on_single_stage(rng):
    for _ in range(5):
        J = single_stage(random_pmf(rng, 5), "s")
        cfg = SimConfig(0.8 / expected_total_size(J), jobs=20_000, reps=2, seed=3)
        a = simulate(J, cfg, "BGP", record=25_000)
        b = simulate(J, cfg, "MGP", record=25_000)
        for (ia, ta), (ib, tb) in zip(a.completions, b.completions):
            assert np.array_equal(ia, ib) and np.array_equal(ta, tb)


def test_mgp_equals_fcfs_on_deterministic_jobs():
    J = deterministic(3.0)
    cfg = SimConfig(0.9 / 3, jobs=20_000, reps=2, seed=9)
    a = simulate(J, cfg, "FCFS", record=25_000)
    b = simulate(J, cfg, "MGP", record=25_000)
    for (ia, ta), (ib, tb) in zip(a.completions, b.completions):
        assert np.array_equal(ia, ib) and np.array_equal(ta, tb)


def test_policy_ordering_and_analytic_agreement():
    R = load("repair.json")
    cfg = SimConfig(0.09, jobs=100_000, reps=10, seed=1)
    res = {p: simulate(R, cfg, p) for p in PolicyKind}
    assert res[PolicyKind.MGP].mean_T <= res[PolicyKind.BGP].mean_T
    assert res[PolicyKind.MGP].mean_T <= res[PolicyKind.FCFS].mean_T
    tq = mean_queueing_time_gittins(QueueModel(R, 0.09))
    assert abs(res[PolicyKind.MGP].mean_TQ - tq) <= res[PolicyKind.MGP].ci95_TQ


def test_sweep_rows():
    rows = sweep(single_stage(S_PMF, "S"), [0.3, 0.6], ["FCFS", "MGP"],
                 SimConfig(1.0, jobs=5000, reps=2))
    assert [(r["rho"], r["policy"]) for r in rows] == [
        (0.3, "FCFS"), (0.3, "MGP"), (0.6, "FCFS"), (0.6, "MGP")]
    assert np.isnan(rows[0]["analytic_TQ"]) and rows[1]["analytic_TQ"] > 0
    assert rows[0]["lambda"] == pytest.approx(0.3 / 6.5)


def test_capacity_growth():
    # a heavy load pushes the number in system past the initial slot capacity
    J = single_stage(Pmf((0.5, 60.0), (0.9, 0.1)), "s")
    cfg = SimConfig(0.97 / J.pmf("s").mean, jobs=30_000, reps=1, seed=2)
    res = simulate(J, cfg, "FCFS")
    assert res.violations == 0 and res.accounting_errors == 0


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(0.5, jobs=10, warmup=10)
    with pytest.raises(ValueError):
        SimConfig(0.5, reps=0)
    with pytest.raises(ValueError):
        PolicyKind.parse("SRPT")
