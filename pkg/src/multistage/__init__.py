"""Gittins scheduling of multistage jobs: indices, analytic queueing times, simulation."""
from .analysis import (CostCurves, QueueModel, build_cost_curves, cost_a, interference_no_arrivals,
                       mean_queueing_time_gittins, mean_response_time, prevailing_tail)
from .errors import *  # noqa: F401,F403
from .model import (FINAL, ZERO_SIZE, JobState, JobType, Pmf, build_job_type, chain,
                    condition_job, condition_stage, deterministic, expected_total_size,
                    mixture_compose, reach_prob, sequential_compose, single_stage, total_size_pmf)
from .pwl import PwlFunction, pwl_compose, pwl_eval, pwl_inverse, pwl_mix
from .sim import PolicyKind, SimConfig, SimResult, priority_of, sample_job, simulate, sweep
from .sjp import (IndexValue, fair_at_state, fair_index, sjp_chain, sjp_of_job,
                  sjp_single_stage)

__version__ = "0.1.0"
