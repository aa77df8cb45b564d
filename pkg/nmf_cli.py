#!/usr/bin/env python3
"""
conic-nmf command line
Single factorizations, multi-initialization campaigns, rank-one over-approximations and
minimum-FW-gap traces.

Exit codes: 0 success (relative error <= 1e-6), 1 completed without success, 2 error.
"""

import functools
import json
import sys
from pathlib import Path
from typing import Callable, Optional, Tuple

import click
from pydantic import ValidationError

import conic_nmf.config as config
from conic_nmf.campaign import (
    Campaign,
    InstanceSpec,
    format_table_row,
    gaptrace,
    run_campaign,
    run_seeds,
    write_run_outputs,
)
from conic_nmf.exceptions import ConicNMFError, InvalidInputError
from conic_nmf.formulations import Formulation
from conic_nmf.fw_driver import DriverConfig, InitializerSpec, RefineMode, StepRule, run
from conic_nmf.hals_refine import HalsConfig
from conic_nmf.instances import default_maxiter
from conic_nmf.ipm_solver import SolverConfig
from conic_nmf.logger import logger, set_verbosity
from conic_nmf.rank1_nmo import solve_rank1
from conic_nmf.schemas import RunStatus

EXIT_SUCCESS, EXIT_INCOMPLETE, EXIT_ERROR = 0, 1, 2


# ========================================
# Option parsing helpers
# ========================================

def _parse_ints(text: Optional[str], count: Optional[int] = None, what: str = "value") -> Optional[Tuple[int, ...]]:
    if text is None:
        return None
    if text.strip().lower() in ("", "none", "off"):
        return ()
    try:
        values = tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise click.BadParameter(f"{what} must be comma-separated integers, got {text!r}") from exc
    if count is not None and len(values) != count:
        raise click.BadParameter(f"{what} needs {count} integers, got {len(values)}")
    return values


def _instance_spec(builtin: Optional[str], matrix: Optional[Path], random: Optional[str], a: Optional[float]) -> InstanceSpec:
    if sum(x is not None for x in (builtin, matrix, random)) != 1:
        raise click.UsageError("give exactly one of --builtin, --matrix or --random F,N,K")
    return InstanceSpec(
        builtin=builtin,
        matrix_path=matrix,
        random=_parse_ints(random, 3, "--random"),
        a=a,
    )


def instance_options(command: Callable) -> Callable:
    command = click.option("--a", "a", type=float, default=None, help="Hexagon parameter for --builtin V_a.")(command)
    command = click.option("--random", "random", default=None, metavar="F,N,K", help="Random product of rank K.")(command)
    command = click.option("--matrix", "matrix", type=click.Path(exists=False, dir_okay=False, path_type=Path),
                           default=None, help="CSV matrix with an 'F,N' header.")(command)
    command = click.option("--builtin", "builtin", default=None, help="Catalog instance name.")(command)
    return command


def driver_options(command: Callable) -> Callable:
    options = [
        click.option("--k", "K", type=int, default=None, help="Factorization rank (default: known nonnegative rank)."),
        click.option("--step", type=click.Choice([s.value for s in StepRule]), default=StepRule.UNIT.value),
        click.option("--maxiter", type=int, default=None, help="Default: 3000 for rigid instances, 750 otherwise."),
        click.option("--init", "init", default="uniform", help="uniform or rank1:d"),
        click.option("--spi-at", "spi_at", default=None, metavar="I,J", help="SPI iterations ('none' disables)."),
        click.option("--spi-th", "spi_th", type=float, default=config.SPI_THRESHOLD),
        click.option("--refine", type=click.Choice([r.value for r in RefineMode]), default=RefineMode.AUTO.value),
        click.option("--seed", type=int, default=0),
        click.option("--out", "out", type=click.Path(file_okay=False, path_type=Path), default=Path(config.OUT_DIR)),
        click.option("--verbose", "verbose", type=int, default=None, help="0 warnings, 1 info, 2+ debug."),
        click.option("--full-trace", is_flag=True, help="Disable early stopping."),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _driver_config(instance_name: str, step: str, maxiter: Optional[int], spi_at: Optional[str], spi_th: float,
                   refine: str, seed: Optional[int], verbose: Optional[int], full_trace: bool) -> DriverConfig:
    return DriverConfig(
        maxiter=maxiter if maxiter is not None else default_maxiter(instance_name),
        step_rule=StepRule(step),
        spi_schedule=_parse_ints(spi_at, what="--spi-at"),
        spi_threshold=spi_th,
        refine=RefineMode(refine),
        seed=seed,
        early_stop=not full_trace,
        solver=SolverConfig(verbosity=verbose or 0),
        hals=HalsConfig(),
    )


def guarded(command: Callable) -> Callable:
    """Map library and validation errors onto exit code 2 with a one-line diagnostic."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (ConicNMFError, ValidationError) as exc:
            logger.debug("command failed", exc_info=True)
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_ERROR)

    return wrapper


# ========================================
# Commands
# ========================================

@click.group()
def cli() -> None:
    """Exact NMF by successive conic convex approximation."""


@cli.command()
@instance_options
@driver_options
@click.option("--form", type=click.Choice([f.value for f in Formulation]), default=Formulation.SOC_OVER.value)
@guarded
def factorize(builtin, matrix, random, a, K, step, maxiter, init, spi_at, spi_th, refine, seed, out, verbose,
              full_trace, form):
    """Run one factorization and write report.json, trace.csv, W.csv and H.csv."""
    if verbose is not None:
        set_verbosity(verbose)
    spec = _instance_spec(builtin, matrix, random, a)
    V = spec.load(run_seeds(seed, 1)[0][1])
    K = K if K is not None else spec.rank()
    if K is None:
        raise InvalidInputError(f"no default rank for '{spec.label}'; pass --k")
    driver = _driver_config(spec.builtin or spec.label, step, maxiter, spi_at, spi_th, refine, seed, verbose, full_trace)
    report = run(V, K, form, driver, init=InitializerSpec.parse(init))
    directory = write_run_outputs(report, out / f"{V.name}_K{K}_{form}_s{seed}")
    status = RunStatus(report.status)
    click.echo(f"{status.value}: relative error {report.final_rel_err:.3e} after {report.iterations} iterations "
               f"-> {directory}")
    if status is RunStatus.SUCCESS:
        sys.exit(EXIT_SUCCESS)
    sys.exit(EXIT_INCOMPLETE if status is RunStatus.COMPLETED else EXIT_ERROR)


@cli.command()
@instance_options
@driver_options
@click.option("--form", "forms", type=click.Choice([f.value for f in Formulation] + ["both"]), multiple=True,
              default=(Formulation.SOC_OVER.value,), help="Repeatable; 'both' runs exp and soc.")
@click.option("--inits", type=int, default=config.DESK_N_INITS, help=f"Full protocol: {config.FULL_N_INITS}.")
@click.option("--jobs", type=int, default=config.CONIC_NMF_JOBS, help="Parallel runs (env CONIC_NMF_JOBS).")
@guarded
def campaign(builtin, matrix, random, a, K, step, maxiter, init, spi_at, spi_th, refine, seed, out, verbose,
             full_trace, forms, inits, jobs):
    """Run --inits seeded factorizations per formulation and print a success-table row."""
    if verbose is not None:
        set_verbosity(verbose)
    spec = _instance_spec(builtin, matrix, random, a)
    chosen = [Formulation.EXP_UNDER, Formulation.SOC_OVER] if "both" in forms else [Formulation(f) for f in forms]
    driver = _driver_config(spec.builtin or spec.label, step, maxiter, spi_at, spi_th, refine, seed, verbose, full_trace)
    summaries = run_campaign(Campaign(
        instance=spec,
        rank=K,
        forms=tuple(dict.fromkeys(chosen)),
        n_inits=inits,
        driver=driver,
        initializer=InitializerSpec.parse(init),
        out_dir=out,
        master_seed=seed,
        jobs=jobs,
    ))
    click.echo(format_table_row(summaries))
    sys.exit(EXIT_SUCCESS if all(s.successes == s.n_inits for s in summaries) else EXIT_INCOMPLETE)


@cli.command()
@instance_options
@click.option("--seed", type=int, default=0, help="Seed for --random instances.")
@click.option("--verbose", "verbose", type=int, default=None)
@guarded
def rank1(builtin, matrix, random, a, seed, verbose):
    """Print the optimal rank-one over-approximation (w, h, objective) as JSON."""
    if verbose is not None:
        set_verbosity(verbose)
    V = _instance_spec(builtin, matrix, random, a).load(run_seeds(seed, 1)[0][1])
    solution = solve_rank1(V, SolverConfig(verbosity=verbose or 0))
    click.echo(json.dumps(solution.as_dict(), indent=2))


@cli.command("gaptrace")
@instance_options
@driver_options
@click.option("--form", type=click.Choice([f.value for f in Formulation]), default=Formulation.SOC_OVER.value)
@click.option("--jobs", type=int, default=config.CONIC_NMF_JOBS)
@guarded
def gaptrace_cmd(builtin, matrix, random, a, K, step, maxiter, init, spi_at, spi_th, refine, seed, out, verbose,
                 full_trace, form, jobs):
    """Run both step rules from one start and write the paired minimum-FW-gap CSV."""
    if verbose is not None:
        set_verbosity(verbose)
    spec = _instance_spec(builtin, matrix, random, a)
    V = spec.load(run_seeds(seed, 1)[0][1])
    K = K if K is not None else spec.rank()
    if K is None:
        raise InvalidInputError(f"no default rank for '{spec.label}'; pass --k")
    driver = _driver_config(spec.builtin or spec.label, step, maxiter, spi_at, spi_th, refine, seed, verbose, True)
    path, reports = gaptrace(V, K, Formulation(form), driver, out / f"gaptrace_{V.name}_K{K}_{form}_s{seed}",
                             InitializerSpec.parse(init), jobs=jobs)
    for rule, report in reports.items():
        click.echo(f"{rule}: final min gap {report.min_gap[-1] if report.min_gap else float('nan'):.3e}, "
                   f"rate check {'passed' if report.rate_check_passed else 'FAILED'}")
    click.echo(str(path))


if __name__ == "__main__":
    cli()
