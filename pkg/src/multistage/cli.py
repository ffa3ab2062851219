"""Command-line front end: ``multistage <command> SPEC ...``.

SPEC is a job-spec JSON file.  Names of the bundled examples (``repair.json``,
``fig4_mixture.json``, ...) resolve to the copies shipped with the package
when no such file exists in the working directory.
"""
from __future__ import annotations

import csv
import json
import math
import sys
from importlib import resources
from pathlib import Path

import click

from .analysis import QueueModel, stage_contributions
from .errors import MultistageError, ParseError
from .model import (JobState, JobType, build_job_type, expected_total_size, job_type_to_spec,
                    load_job_spec_text, sequential_compose)
from .sim import SWEEP_COLUMNS, PolicyKind, SimConfig, simulate, sweep
from .sjp import fair_at_state, fair_index, sjp_of_job


def fmt(x: float) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else f"{x:.12g}"


def _resolve(path: str) -> Path:
    p = Path(path)
    if p.exists():
        return p
    bundled = resources.files("multistage") / "jobspecs" / p.name
    if bundled.is_file():
        return Path(str(bundled))
    raise ParseError(f"{path}: no such file")


def parse_job_spec(path: str) -> JobType:
    """Read and validate a job-spec file, reporting where parsing failed."""
    p = _resolve(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from None
    try:
        spec = load_job_spec_text(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    try:
        return build_job_type(spec)
    except MultistageError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def _rate(job: JobType, lam: float | None, rho: float | None) -> float:
    if (lam is None) == (rho is None):
        raise click.UsageError("give exactly one of --lambda and --rho")
    return lam if lam is not None else rho / expected_total_size(job)


def parse_range(text: str) -> list[float]:
    """``LO:HI:STEP`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            lo, hi, step = (float(v) for v in text.split(":"))
            if step <= 0 or hi < lo:
                raise ValueError
            n = int(round((hi - lo) / step))
            return [round(lo + k * step, 12) for k in range(n + 1)]
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise click.BadParameter(f"{text!r} is not LO:HI:STEP or a comma list") from None


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except MultistageError as exc:
            click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
            ctx.exit(1)
        except ValueError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(1)


@click.group(cls=_Group)
def main():
    """Gittins indices, analytic queueing times and simulation for multistage jobs."""


@main.command()
@click.argument("spec")
def validate(spec):
    """Check a job spec and summarise it."""
    job = parse_job_spec(spec)
    click.echo(f"OK {job.name}: {len(job)} stages, E[S]={fmt(expected_total_size(job))}")


@main.command()
@click.argument("spec")
@click.option("--stage", default=None, help="Stage of the state (default: initial stage).")
@click.option("--age", type=float, default=0.0, show_default=True, help="Age within the stage.")
def index(spec, stage, age):
    """Print the SJP index (fair) and Gittins index of a job or state."""
    job = parse_job_spec(spec)
    if stage is None and age == 0.0:
        fair = fair_index(sjp_of_job(job)).fair
    else:
        stage = stage or job.initial
        if stage not in job.stages or stage == job.final:
            raise ParseError(f"unknown stage {stage!r}")
        fair = fair_at_state(job, JobState(stage, age))
    click.echo(f"fair={fmt(fair)} gittins={fmt(1.0 / fair)}")


@main.command()
@click.argument("spec")
@click.option("--samples", type=int, default=0, help="Also print this many (r, V(r)) samples.")
@click.option("--r-max", type=float, default=None, help="Sample range end (default: 1.25 x last breakpoint).")
def sjp(spec, samples, r_max):
    """Dump the SJP function as breakpoint,slope rows."""
    v = sjp_of_job(parse_job_spec(spec))
    out = csv.writer(sys.stdout, lineterminator="\n")
    out.writerow(["breakpoint", "slope"])
    for b, s in v.segments():
        out.writerow([fmt(b), fmt(s)])
    if samples > 0:
        end = r_max if r_max is not None else 1.25 * v.last_breakpoint
        out.writerow([])
        out.writerow(["r", "V"])
        for k in range(samples):
            r = end * k / max(samples - 1, 1)
            out.writerow([fmt(r), fmt(v(r))])


@main.command()
@click.option("--seq", "seq", nargs=2, required=True, metavar="FIRST SECOND",
              help="Compose FIRST then SECOND.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write here instead of stdout.")
def compose(seq, out):
    """Write the sequential composition of two job specs."""
    first, second = (parse_job_spec(p) for p in seq)
    text = json.dumps(job_type_to_spec(sequential_compose(first, second)), indent=2) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        click.echo(text, nl=False)


@main.command()
@click.argument("spec")
@click.option("--lambda", "lam", type=float, default=None, help="Arrival rate.")
@click.option("--rho", type=float, default=None, help="Load (converted via E[S]).")
@click.option("--r-nodes", type=int, default=16, show_default=True)
@click.option("--x-nodes", type=int, default=32, show_default=True)
@click.option("--per-stage", type=click.Path(dir_okay=False), default=None,
              help="Write per-stage contributions as CSV.")
def analyze(spec, lam, rho, r_nodes, x_nodes, per_stage):
    """Analytic mean queueing and response time under the Gittins policy."""
    job = parse_job_spec(spec)
    m = QueueModel(job, _rate(job, lam, rho), r_nodes=r_nodes, x_nodes=x_nodes)
    parts = stage_contributions(m)
    tq = math.fsum(parts.values())
    click.echo(f"rho={fmt(m.load)}")
    click.echo(f"mean_TQ={fmt(tq)}")
    click.echo(f"mean_T={fmt(tq + expected_total_size(job))}")
    if per_stage:
        with open(per_stage, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "contribution"])
            for s, c in parts.items():
                w.writerow([s, fmt(c)])


@main.command("simulate")
@click.argument("spec")
@click.option("--lambda", "lam", type=float, default=None)
@click.option("--rho", type=float, default=None)
@click.option("--policy", type=click.Choice([p.name for p in PolicyKind], case_sensitive=False),
              default="MGP", show_default=True)
@click.option("--jobs", type=int, default=100_000, show_default=True)
@click.option("--warmup", type=int, default=None, help="Jobs excluded from statistics (default 20%).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--reps", type=int, default=10, show_default=True)
def simulate_cmd(spec, lam, rho, policy, jobs, warmup, seed, reps):
    """Simulate one policy and print mean response and queueing times."""
    job = parse_job_spec(spec)
    cfg = SimConfig(_rate(job, lam, rho), jobs, warmup, seed, reps)
    res = simulate(job, cfg, policy)
    click.echo(f"policy={res.policy.name}")
    click.echo(f"mean_T={fmt(res.mean_T)}")
    click.echo(f"mean_TQ={fmt(res.mean_TQ)}")
    click.echo(f"ci95={fmt(res.ci95)}")
    click.echo(f"ci95_TQ={fmt(res.ci95_TQ)}")


@main.command("sweep")
@click.argument("spec")
@click.option("--rho", "rho_text", required=True, help="LO:HI:STEP (inclusive) or a comma list.")
@click.option("--policies", default="FCFS,BGP,MGP", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--jobs", type=int, default=100_000, show_default=True)
@click.option("--warmup", type=int, default=None)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--reps", type=int, default=10, show_default=True)
@click.option("--no-analytic", is_flag=True, help="Skip the analytic column.")
def sweep_cmd(spec, rho_text, policies, out, jobs, warmup, seed, reps, no_analytic):
    """Simulate several policies over a load grid and write CSV."""
    job = parse_job_spec(spec)
    grid = parse_range(rho_text)
    pols = [PolicyKind.parse(p.strip()) for p in policies.split(",") if p.strip()]
    rows = sweep(job, grid, pols, SimConfig(1.0, jobs, warmup, seed, reps), analytic=not no_analytic)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow([row["policy"] if c == "policy" else fmt(row[c]) for c in SWEEP_COLUMNS])
    click.echo(f"wrote {len(rows)} rows to {out}")


if __name__ == "__main__":
    main()
