import math

import numpy as np
import pytest
from scipy import integrate

from helpers import S_PMF, load, random_job
from multistage.analysis import (CostCurves, QueueModel, build_cost_curves, cost_a,
                                 interference_no_arrivals, mean_queueing_time_gittins,
                                 mean_response_time, prevailing_tail, stage_contributions)
from multistage.errors import Unstable
from multistage.model import (JobState, condition_job, deterministic, expected_total_size,
                              reach_prob)
from multistage.pwl import PwlFunction
from multistage.sjp import sjp_of_job, sjp_single_stage

pytestmark = pytest.mark.filterwarnings("ignore::scipy.integrate.IntegrationWarning")

VS = sjp_single_stage(S_PMF)
D2 = PwlFunction.hinge(2)


def test_cost_a_examples():
    assert cost_a(D2, 5) == 2
    assert cost_a(VS, 6) == 4
    assert cost_a(VS, 0) == 0


def test_prevailing_tail_examples():
    assert prevailing_tail(D2, 1) == 1 and prevailing_tail(D2, 3) == 0
    assert prevailing_tail(VS, 5) == 0.5
    val, _ = integrate.quad(lambda r: prevailing_tail(VS, r), 0, 20, points=[2, 11])
    assert val == pytest.approx(6.5, abs=1e-9)


def test_prevailing_tail_is_valid_tail(rng):
    for _ in range(40):
        J = random_job(rng)
        v = sjp_of_job(J)
        r = np.linspace(0, v.last_breakpoint + 5, 2000)
        tail = 1 - v.slope_many(r)
        assert np.all((tail >= 0) & (tail <= 1)) and np.all(np.diff(tail) <= 0)
        # exact piecewise integral equals E[S] and, up to r, C_A
        assert interference_no_arrivals(v, PwlFunction.identity()) == 0
        area = math.fsum((1 - s) * (b2 - b1) for b1, b2, s in
                         zip((0.0,) + v.breakpoints, v.breakpoints, (0.0,) + v.slopes))
        assert area == pytest.approx(expected_total_size(J), abs=1e-9)
        for x in r[::200]:
            val, _ = integrate.quad(lambda t: prevailing_tail(v, t), 0, x,
                                    points=[b for b in v.breakpoints if b < x] or None, limit=200)
            assert val == pytest.approx(cost_a(v, x), abs=1e-7)


def test_interference_values():
    assert interference_no_arrivals(D2, PwlFunction.hinge(3)) == 2
    assert interference_no_arrivals(VS, VS) == 4.25
    assert interference_no_arrivals(D2, VS) == 2


def test_interference_symmetric_and_bounded(rng):
    for _ in range(50):
        a, b = sjp_of_job(random_job(rng)), sjp_of_job(random_job(rng))
        x, y = interference_no_arrivals(a, b), interference_no_arrivals(b, a)
        assert x == pytest.approx(y, abs=1e-12)
        assert x <= min(a.mean_size, b.mean_size) + 1e-9


def test_cost_curve_examples():
    c = CostCurves(D2, 0.1)
    assert c.rho(1.0) == pytest.approx(0.1) and c.rho(10.0) == pytest.approx(0.2)
    r = np.linspace(0, 30, 1000)
    assert np.all(c.w(r) >= r)
    with pytest.raises(Unstable):
        CostCurves(D2, 0.5)
    with pytest.raises(Unstable):
        CostCurves(D2, 0.4999)


def test_cost_b_derivative_matches_finite_difference():
    R = load("repair.json")
    c = build_cost_curves(QueueModel(R, 0.09))
    v = sjp_of_job(condition_job(R, JobState("D", 0.3)))
    r = np.array([0.7, 3.3, 6.1, 9.0, 12.5, 14.2])
    h = 1e-6
    fd = (c.cost_b(v, r + h) - c.cost_b(v, r - h)) / (2 * h)
    assert np.allclose(c.cost_b_prime(v, r), fd, atol=1e-5)


def test_tail_ratio_is_tail():
    for J in (load("repair.json"), load("fig4_mixture.json")):
        for rho in (0.3, 0.9):
            m = QueueModel.from_load(J, rho)
            c = build_cost_curves(m)
            r = np.linspace(0, 40, 1000)
            for s in J.nonfinal:
                if J.is_zero(s):
                    continue
                for x in np.linspace(0, J.pmf(s).max_size, 7)[:-1]:
                    v = sjp_of_job(condition_job(J, JobState(s, float(x))))
                    t = c.tail_ratio(v, r)
                    assert np.all((t >= -1e-12) & (t <= 1 + 1e-12))
                    assert np.all(np.diff(t) <= 1e-12)


@pytest.mark.parametrize("lam", [0.2, 0.5, 0.8])
def test_md1(lam):
    m = QueueModel(deterministic(1.0), lam)
    assert mean_queueing_time_gittins(m) == pytest.approx(lam / (2 * (1 - lam)), rel=1e-3)


def test_md1_response_time():
    assert mean_response_time(QueueModel(deterministic(1.0), 0.5)) == pytest.approx(1.5, rel=1e-6)


def test_light_traffic():
    R = load("repair.json")
    assert mean_queueing_time_gittins(QueueModel(R, 1e-6)) < 1e-4
    assert mean_response_time(QueueModel(R, 0.0)) == pytest.approx(23 / 3)


def test_refuses_near_unit_load():
    with pytest.raises(Unstable):
        mean_queueing_time_gittins(QueueModel.from_load(load("repair.json"), 0.9995))


def nested_quad_oracle(job, lam):
    """Mean queueing-time integral by adaptive scipy quadrature with fresh conditioned jobs."""
    v_a = sjp_of_job(job)
    q = reach_prob(job)
    total = 0.0

    def inner(v):
        def f(r):
            one = 1 - lam * (r - v_a(r))
            a_s, da_s = r - v(r), 1 - v.slope_at(r)
            da_a = 1 - v_a.slope_at(r)
            return (da_s * one + lam * a_s * da_a) * da_a / (one**2 * (one + lam * r * da_a))
        pts = sorted(set(v.breakpoints) | set(v_a.breakpoints))
        val, _ = integrate.quad(f, 0, max(pts), points=pts, limit=400, epsabs=1e-12, epsrel=1e-11)
        return val

    for s in job.nonfinal:
        if job.is_zero(s):
            continue
        d = job.pmf(s)
        edges = (0.0,) + d.sizes
        for k in range(len(d.sizes)):
            tail = d.tail(edges[k])
            g = lambda x: inner(sjp_of_job(condition_job(job, JobState(s, x))))
            val, _ = integrate.quad(g, edges[k], edges[k + 1], limit=200, epsabs=1e-10, epsrel=1e-9)
            total += lam * q[s] * tail * val
    return total


@pytest.mark.parametrize("name,rho", [("repair.json", 0.69), ("fig4_mixture.json", 0.6)])
def test_queueing_time_against_nested_adaptive_quadrature(name, rho):
    J = load(name)
    lam = rho / expected_total_size(J)
    assert mean_queueing_time_gittins(QueueModel(J, lam)) == pytest.approx(
        nested_quad_oracle(J, lam), rel=1e-6)


def test_random_job_against_oracle(rng):
    for _ in range(2):
        J = random_job(rng, 3, 3)
        lam = 0.7 / expected_total_size(J)
        assert mean_queueing_time_gittins(QueueModel(J, lam)) == pytest.approx(
            nested_quad_oracle(J, lam), rel=1e-5)


@pytest.mark.parametrize("name", ["repair.json", "fig4_mixture.json"])
def test_node_doubling_converges(name):
    J = load(name)
    a = mean_queueing_time_gittins(QueueModel.from_load(J, 0.8))
    b = mean_queueing_time_gittins(QueueModel.from_load(J, 0.8, r_nodes=32, x_nodes=64))
    assert abs(a - b) <= 1e-4 * abs(b)


def test_zero_size_head_contributes_nothing():
    F = load("fig4_mixture.json")
    parts = stage_contributions(QueueModel.from_load(F, 0.5))
    assert parts["start"] == 0.0
    assert list(parts) == [s for s in F.order if s != F.final]


def test_summation_order_is_deterministic():
    F = load("fig4_mixture.json")
    m = QueueModel.from_load(F, 0.7)
    assert mean_queueing_time_gittins(m) == mean_queueing_time_gittins(m)
