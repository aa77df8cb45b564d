"""
Campaign Harness
Multi-initialization experiments: seeded fan-out of independent factorization runs over joblib
workers, a single aggregator that writes every report, trace and summary, success-table rows and
the paired minimum-FW-gap traces of the two step rules.
"""

import csv
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, model_validator

import conic_nmf.config as config
from conic_nmf.exceptions import ConicNMFError, InvalidInputError
from conic_nmf.formulations import Formulation
from conic_nmf.fw_driver import DriverConfig, InitializerSpec, StepRule, rate_check, run, write_trace_csv
from conic_nmf.instances import (
    NonnegMatrix,
    builtin_matrix,
    default_rank,
    gen_random_product,
    load_matrix,
    save_matrix,
    save_report,
)
from conic_nmf.logger import logger
from conic_nmf.schemas import CampaignSummary, RunReport, RunStatus


class InstanceSpec(BaseModel):
    """Exactly one of: a catalog name, a CSV path, or random-product parameters (F, N, K)."""

    model_config = ConfigDict(frozen=True)

    builtin: Optional[str] = None
    matrix_path: Optional[Path] = None
    random: Optional[Tuple[int, int, int]] = None
    a: Optional[float] = None

    @model_validator(mode="after")
    def _one_source(self) -> "InstanceSpec":
        given = [x for x in (self.builtin, self.matrix_path, self.random) if x is not None]
        if len(given) != 1:
            raise ValueError("give exactly one of builtin, matrix_path or random")
        return self

    @property
    def label(self) -> str:
        if self.random is not None:
            F, N, K = self.random
            return f"random_{F}x{N}_k{K}"
        if self.matrix_path is not None:
            return self.matrix_path.stem
        return self.builtin if self.a is None else f"{self.builtin}_a{self.a:g}"

    @property
    def regenerates(self) -> bool:
        """Random instances draw a fresh matrix for every run."""
        return self.random is not None

    def load(self, seed: int = 0) -> NonnegMatrix:
        if self.random is not None:
            F, N, K = self.random
            return gen_random_product(F, N, K, seed)
        if self.matrix_path is not None:
            return load_matrix(self.matrix_path)
        return builtin_matrix(self.builtin, a=self.a)

    def rank(self) -> Optional[int]:
        if self.random is not None:
            return self.random[2]
        return default_rank(self.load())


class CampaignTiming(BaseModel):
    wall_time: float
    run_times: List[float]


class Campaign(BaseModel):
    model_config = ConfigDict(frozen=True)

    instance: InstanceSpec
    rank: Optional[int] = Field(None, ge=1)
    forms: Tuple[Formulation, ...] = (Formulation.SOC_OVER,)
    n_inits: int = Field(config.DESK_N_INITS, ge=1)
    driver: DriverConfig = Field(default_factory=DriverConfig)
    initializer: InitializerSpec = Field(default_factory=InitializerSpec)
    out_dir: Path = Path(config.OUT_DIR)
    master_seed: int = 0
    jobs: int = Field(config.CONIC_NMF_JOBS, ge=1)
    write_traces: bool = True

    def resolved_rank(self) -> int:
        K = self.rank if self.rank is not None else self.instance.rank()
        if K is None:
            raise InvalidInputError(f"no default rank for '{self.instance.label}'; pass --k")
        return K


# ========================================
# Seeds
# ========================================

def run_seeds(master_seed: int, n: int) -> List[Tuple[int, int]]:
    """(init seed, matrix seed) per run, from a fixed SeedSequence fan-out of the master seed."""
    children = np.random.SeedSequence(master_seed).spawn(n)
    return [tuple(int(v) for v in child.generate_state(2)) for child in children]


# ========================================
# Workers
# ========================================

def _failed_report(V: NonnegMatrix, K: int, form: Formulation, driver: DriverConfig,
                   initializer: InitializerSpec, reason: str) -> RunReport:
    nan = float("nan")
    return RunReport(
        instance=V.name, rows=V.rows, cols=V.cols, rank=K, formulation=form.value,
        step_rule=driver.step_rule.value, seed=driver.seed, initializer=initializer.label,
        maxiter=driver.maxiter, spi_threshold=driver.spi_threshold, factor_bound=driver.factor_bound,
        phi0=nan, phi_lb=nan, rel_err0=nan, status=RunStatus.ABORTED, abort_reason=reason,
    )


def _execute_run(V: NonnegMatrix, K: int, form: Formulation, driver: DriverConfig,
                 initializer: InitializerSpec) -> RunReport:
    """Worker body; a failing run becomes an aborted report instead of failing the campaign."""
    try:
        return run(V, K, form, driver, init=initializer)
    except ConicNMFError as exc:
        logger.error(f"❌ run seed={driver.seed} failed: {exc}", exc_info=True)
        return _failed_report(V, K, form, driver, initializer, str(exc))


def write_run_outputs(report: RunReport, directory: Union[str, Path], factors: bool = True) -> Path:
    """report.json and trace.csv (plus W.csv and H.csv) in directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_report(report, directory / "report.json")
    write_trace_csv(report, directory / "trace.csv")
    if factors and report.W:
        save_matrix(np.asarray(report.W), directory / "W.csv")
        save_matrix(np.asarray(report.H), directory / "H.csv")
    return directory


def summarize(reports: Sequence[RunReport], form: Formulation, campaign: "Campaign", K: int,
              rows: int, cols: int, wall_time: float) -> CampaignSummary:
    successes = [r for r in reports if r.success]
    return CampaignSummary(
        instance=campaign.instance.label,
        rows=rows,
        cols=cols,
        rank=K,
        formulation=form.value,
        initializer=campaign.initializer.label,
        step_rule=campaign.driver.step_rule.value,
        maxiter=campaign.driver.maxiter,
        n_inits=len(reports),
        successes=len(successes),
        seeds=[r.seed for r in reports],
        final_errors=[r.final_rel_err for r in reports],
        iterations=[r.iterations for r in reports],
        median_iterations_to_success=float(np.median([r.iterations for r in successes])) if successes else None,
        aborted=sum(r.status == RunStatus.ABORTED for r in reports),
        rate_check_failures=sum(r.rate_check_passed is False for r in reports),
        wall_time=wall_time,
    )


def run_campaign(campaign: Campaign) -> List[CampaignSummary]:
    """Run n_inits seeded runs per formulation and write everything under out_dir."""
    K = campaign.resolved_rank()
    seeds = run_seeds(campaign.master_seed, campaign.n_inits)
    shared = None if campaign.instance.regenerates else campaign.instance.load()
    matrices = [shared or campaign.instance.load(matrix_seed) for _, matrix_seed in seeds]
    base = campaign.out_dir / f"{campaign.instance.label}_K{K}"
    summaries = []

    for form in campaign.forms:
        form = Formulation(form)
        logger.info(f"🚀 campaign {campaign.instance.label} K={K} form={form.value} "
                    f"inits={campaign.n_inits} jobs={campaign.jobs}")
        tic = time.perf_counter()
        jobs = [
            delayed(_execute_run)(V, K, form, campaign.driver.model_copy(update={"seed": init_seed}),
                                  campaign.initializer)
            for V, (init_seed, _) in zip(matrices, seeds)
        ]
        reports: List[RunReport] = Parallel(n_jobs=campaign.jobs)(jobs)
        wall = time.perf_counter() - tic

        # single aggregator: all writes happen here, in run order
        form_dir = base / f"{form.value}_{campaign.initializer.label.replace(':', '_')}"
        for index, report in enumerate(reports):
            if campaign.write_traces:
                write_run_outputs(report, form_dir / f"run_{index:03d}", factors=False)
        summary = summarize(reports, form, campaign, K, matrices[0].rows, matrices[0].cols, wall)
        form_dir.mkdir(parents=True, exist_ok=True)
        (form_dir / "summary.json").write_text(
            summary.model_dump_json(indent=2, exclude={"wall_time"}), encoding="utf-8"
        )
        (form_dir / "timing.json").write_text(
            CampaignTiming(wall_time=wall, run_times=[r.wall_time for r in reports]).model_dump_json(indent=2),
            encoding="utf-8",
        )
        logger.info(f"✅ {form.value}: {summary.table_cell()} successes in {wall:.1f}s")
        summaries.append(summary)
    return summaries


def format_table_row(summaries: Sequence[CampaignSummary]) -> str:
    """One success-table line: instance, K, then successes per formulation."""
    if not summaries:
        return ""
    head = summaries[0]
    cells = " | ".join(f"{s.formulation} {s.table_cell()}" for s in summaries)
    return f"{head.instance} | K={head.rank} | {head.initializer} | {cells}"


# ========================================
# Gap traces
# ========================================

def gaptrace(
    V: NonnegMatrix,
    K: int,
    form: Formulation,
    driver: DriverConfig,
    out_dir: Union[str, Path],
    initializer: Optional[InitializerSpec] = None,
    jobs: int = 1,
) -> Tuple[Path, Dict[str, RunReport]]:
    """Run both step rules from the same start and write gaptrace.csv.

    Columns: iter, min_gap_unit, min_gap_adaptive, ref_unit, ref_adaptive with ref = C / (tau_tilde (i + 1)),
    C = phi(Z0) - phi_lb.
    """
    initializer = initializer or InitializerSpec()
    out_dir = Path(out_dir)
    rules = (StepRule.UNIT, StepRule.ADAPTIVE)
    configs = [driver.model_copy(update={"step_rule": rule, "early_stop": False}) for rule in rules]
    reports = Parallel(n_jobs=jobs)(delayed(run)(V, K, form, cfg, initializer) for cfg in configs)
    by_rule = {rule.value: report for rule, report in zip(rules, reports)}
    for rule, report in by_rule.items():
        write_run_outputs(report, out_dir / rule, factors=False)
        if not rate_check(report):
            logger.warning(f"⚠️ {rule} step: minimum FW gap exceeds the C/(tau (i+1)) reference")

    path = out_dir / "gaptrace.csv"
    length = max(len(r.min_gap) for r in reports)
    references = {}
    for rule, cfg in zip(rules, configs):
        report = by_rule[rule.value]
        references[rule.value] = (report.phi0 - report.phi_lb, cfg.tau_tilde())
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iter", "min_gap_unit", "min_gap_adaptive", "ref_unit", "ref_adaptive"])
        for i in range(1, length + 1):
            row: List[object] = [i]
            for rule in rules:
                gaps = by_rule[rule.value].min_gap
                row.append(repr(gaps[i - 1]) if i <= len(gaps) else "")
            for rule in rules:
                C, tau_tilde = references[rule.value]
                row.append(repr(C / (tau_tilde * (i + 1))))
            writer.writerow(row)
    logger.info(f"✅ gap trace written to {path}")
    return path, by_rule
