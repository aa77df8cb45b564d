"""
Frank-Wolfe Driver
Successive conic convex approximation for exact NMF: at every iteration the concave objective is
linearized at the current latent point, the linear model is minimized over the conic feasible set
by the interior-point solver, and the iterate moves towards that minimizer with step 1 (unit rule)
or 2 / (i + 1) (adaptive rule). Sparsity pattern integration fires at scheduled iterations and an
A-HALS pass polishes the final factors.
"""

import csv
import math
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, List, Literal, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, field_validator

import conic_nmf.config as config
from conic_nmf.conic_program import ConicProgram
from conic_nmf.exceptions import ConicNMFError, ContractViolation, InvalidInputError, UnsupportedInputError
from conic_nmf.formulations import (
    Formulation,
    Gradient,
    LatentPoint,
    SparsityPattern,
    SpiMode,
    VariableLayout,
    build_feasible_set,
    combine,
    exp_shift,
    from_factors,
    from_vector,
    grad_phi,
    objective_vector,
    phi,
    phi_lower_bound,
    spi_apply,
    to_factors,
    to_vector,
)
from conic_nmf.hals_refine import HalsConfig, refine
from conic_nmf.instances import FactorPair, NonnegMatrix, relative_error
from conic_nmf.ipm_solver import SolverConfig, SolverStatus, phase1, solve
from conic_nmf.logger import logger
from conic_nmf.rank1_nmo import perturbed_init
from conic_nmf.schemas import IterationStats, RunReport, RunStatus, SpiEvent

FloatArray = npt.NDArray[np.float64]


class StepRule(str, Enum):
    UNIT = "unit"
    ADAPTIVE = "adaptive"


class RefineMode(str, Enum):
    AUTO = "auto"
    ON = "on"
    OFF = "off"


class InitializerSpec(BaseModel):
    """Uniform-(0, 1] factors, or the rank-one over-approximation perturbed by d."""

    model_config = ConfigDict(frozen=True)

    kind: Literal["uniform", "rank1"] = "uniform"
    d: float = Field(config.PERTURBATION_D, gt=0)

    @classmethod
    def parse(cls, text: str) -> "InitializerSpec":
        """'uniform', 'rank1' or 'rank1:<d>'."""
        kind, _, rest = text.strip().partition(":")
        if kind == "uniform" and not rest:
            return cls(kind="uniform")
        if kind == "rank1":
            if not rest:
                return cls(kind="rank1")
            try:
                return cls(kind="rank1", d=float(rest))
            except ValueError as exc:
                raise InvalidInputError(f"initializer '{text}' needs a positive perturbation size d") from exc
        raise InvalidInputError(f"unknown initializer '{text}' (expected uniform or rank1:d)")

    @property
    def label(self) -> str:
        return "uniform" if self.kind == "uniform" else f"rank1:{self.d:g}"


class DriverConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    maxiter: int = Field(config.MAXITER_DEFAULT, ge=1)
    step_rule: StepRule = StepRule.UNIT
    success_tol: float = Field(config.SUCCESS_TOL, gt=0)
    spi_schedule: Optional[Tuple[int, ...]] = None  # None: 80% and 95% of maxiter; () disables
    spi_threshold: float = Field(config.SPI_THRESHOLD, gt=0)
    spi_mode: SpiMode = SpiMode.FACTOR
    refine: RefineMode = RefineMode.AUTO
    seed: Optional[int] = None
    early_stop: bool = True
    factor_bound: float = Field(config.FACTOR_BOUND, gt=1)
    exp_zero_shift: float = Field(config.EXP_ZERO_SHIFT, ge=0)  # 0 rejects zeros under the exp form
    warm_blend: float = Field(0.1, ge=0, lt=1)
    recentre_delta: float = Field(0.05, gt=0)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    hals: HalsConfig = Field(default_factory=HalsConfig)

    @field_validator("spi_schedule")
    @classmethod
    def _positive_iterations(cls, value: Optional[Tuple[int, ...]]) -> Optional[Tuple[int, ...]]:
        if value is not None and any(i < 1 for i in value):
            raise ValueError("SPI iterations are 1-based")
        return value

    def resolved_spi_schedule(self) -> Tuple[int, ...]:
        if self.spi_schedule is not None:
            return tuple(sorted(set(self.spi_schedule)))
        return tuple(sorted({math.ceil(0.8 * self.maxiter), math.ceil(0.95 * self.maxiter)}))

    def tau(self, iteration: int) -> float:
        return 1.0 if self.step_rule is StepRule.UNIT else 2.0 / (iteration + 1.0)

    def tau_tilde(self) -> float:
        """Smallest step of a full run."""
        return 1.0 if self.step_rule is StepRule.UNIT else 2.0 / (self.maxiter + 1.0)


Initializer = Union[None, InitializerSpec, FactorPair]
Callback = Callable[[int, LatentPoint, RunReport], None]


# ========================================
# FW gap and trace checks
# ========================================

def fw_gap(gradient: Gradient, Z: LatentPoint, V_lmo: LatentPoint) -> float:
    """<grad phi(Z), Z - V_lmo> over the U, T coordinates, tiny negatives clamped to 0."""
    at_Z = gradient.inner(Z)
    gap = at_Z - gradient.inner(V_lmo)
    scale = max(1.0, abs(at_Z))
    if gap < -config.FW_GAP_VIOLATION * scale:
        raise ContractViolation(f"negative FW gap {gap:.3e}: the linear subproblem was not solved to tolerance")
    return max(gap, 0.0)


def _applied_spi(report: RunReport) -> dict:
    return {e.iteration: e for e in report.spi_events if not e.rolled_back and (e.added_U or e.added_T)}


def rate_check(report: RunReport, tau_tilde: Optional[float] = None) -> bool:
    """min_gap(i) * tau_tilde * (i + 1) <= phi(Z0) - phi_lb for every recorded iteration i.

    Objective increases caused by SPI re-interiorization are added to the budget.
    """
    if tau_tilde is None:
        tau_tilde = 1.0 if report.step_rule == StepRule.UNIT.value else 2.0 / (report.maxiter + 1.0)
    budget = report.phi0 - report.phi_lb
    budget += sum(max(0.0, e.phi_after - e.phi_before) for e in _applied_spi(report).values())
    slack = 1e-9 * max(1.0, abs(budget))
    for i, g in enumerate(report.min_gap, start=1):
        if g * tau_tilde * (i + 1) > budget + slack:
            return False
    return True


def descent_violations(report: RunReport, slack: float = 1e-8) -> List[int]:
    """Iterations breaking phi(Z_i) <= phi(Z_{i-1}) - tau_i mu_i (+ slack, relative to |phi|)."""
    events = _applied_spi(report)
    violations = []
    previous = report.phi0
    for i, (value, gap, tau) in enumerate(zip(report.phi, report.gap, report.tau), start=1):
        if i in events:
            previous = events[i].phi_after
        if value > previous - tau * gap + slack * max(1.0, abs(previous)):
            violations.append(i)
        previous = value
    return violations


def write_trace_csv(report: RunReport, path: Union[str, Path]) -> Path:
    """Columns iter, phi, gap, min_gap, rel_err, spi_event."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    events = {e.iteration: e for e in report.spi_events}
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["iter", "phi", "gap", "min_gap", "rel_err", "spi_event"])
        writer.writerow([0, repr(report.phi0), "", "", repr(report.rel_err0), ""])
        for i, row in enumerate(zip(report.phi, report.gap, report.min_gap, report.rel_err), start=1):
            event = events.get(i)
            label = ""
            if event is not None:
                label = "rollback" if event.rolled_back else f"U{len(event.added_U)}+T{len(event.added_T)}"
            writer.writerow([i, *(repr(v) for v in row), label])
    return path


# ========================================
# Run
# ========================================

@dataclass
class _State:
    """Feasible set and iterate that change together at SPI events."""

    pattern: SparsityPattern
    program: ConicProgram
    layout: VariableLayout
    Z: LatentPoint


class _Abort(Exception):
    pass


class FrankWolfeRun:
    """One factorization run; use run() for the functional form."""

    def __init__(
        self,
        V: Union[NonnegMatrix, npt.ArrayLike],
        K: int,
        tag: Union[Formulation, str],
        config: Optional[DriverConfig] = None,
        init: Initializer = None,
        callback: Optional[Callback] = None,
    ):
        self.V = V if isinstance(V, NonnegMatrix) else NonnegMatrix(entries=V)
        if K < 1:
            raise InvalidInputError(f"rank K must be positive, got {K}")
        self.K = int(K)
        self.tag = Formulation(tag)
        self.cfg = config or DriverConfig()
        self.init = init
        self.callback = callback
        self.zero_shift = 0.0
        self.V_work = self.V.entries
        if self.tag is Formulation.EXP_UNDER and (self.V.entries <= 0).any():
            if self.cfg.exp_zero_shift <= 0:
                raise UnsupportedInputError(
                    f"{self.V.name} has zero entries, which the exp form cannot represent without a zero shift"
                )
            self.V_work = exp_shift(self.V.entries, self.cfg.exp_zero_shift)
            self.zero_shift = float(self.V_work[0, 0] - self.V.entries[0, 0])
        self.bound = self.cfg.factor_bound

    # --- initialization ---

    def _initial_factors(self) -> Tuple[FactorPair, str]:
        F, N = self.V.shape
        if isinstance(self.init, FactorPair):
            if self.init.W.shape != (F, self.K) or self.init.H.shape != (self.K, N):
                raise InvalidInputError(
                    f"initial factors {self.init.W.shape}, {self.init.H.shape} do not fit V {self.V.shape} at K={self.K}"
                )
            return self.init, "given"
        spec = self.init or InitializerSpec()
        if spec.kind == "rank1":
            return perturbed_init(self.V, self.K, spec.d, seed=self.cfg.seed), spec.label
        rng = np.random.default_rng(self.cfg.seed)
        W = 1.0 - rng.random((F, self.K))
        H = 1.0 - rng.random((self.K, N))
        return FactorPair(W=W, H=H), spec.label

    def _fit_bound(self, P: FactorPair) -> None:
        """Widen the soc box so the rescaled initial factors sit well inside it."""
        if self.tag is not Formulation.SOC_OVER:
            return
        WH = P.product()
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(self.V_work > 0, self.V_work / WH, 0.0)
        gamma = max(1.0, (1.0 + config.INTERIOR_DELTA) ** 2 * float(np.nanmax(ratio)))
        largest = math.sqrt(gamma) * max(float(P.W.max()), float(P.H.max()))
        self.bound = max(self.bound, 10.0 * largest)

    def _state_for(self, pattern: SparsityPattern, Z: LatentPoint) -> _State:
        program = build_feasible_set(self.V_work, self.K, self.tag, pattern, self.bound)
        return _State(pattern=pattern, program=program, layout=VariableLayout.build(pattern), Z=Z)

    # --- per-iteration pieces ---

    def _warm_start(self, state: _State) -> FloatArray:
        """Previous iterate pulled slightly towards a recentred copy of itself."""
        z_prev = to_vector(state.Z, state.layout)
        omega = self.cfg.warm_blend
        if omega == 0.0:
            return z_prev
        try:
            P = to_factors(state.Z)
            anchor = from_factors(P.W, P.H, self.tag, self.V_work, state.pattern,
                                  delta=self.cfg.recentre_delta, factor_bound=self.bound)
        except ConicNMFError:
            return z_prev
        return (1.0 - omega) * z_prev + omega * to_vector(anchor, state.layout)

    def _rel_err(self, Z: LatentPoint) -> float:
        return relative_error(self.V, to_factors(Z))

    def _apply_spi(self, iteration: int, state: _State, report: RunReport) -> _State:
        result = spi_apply(state.Z, self.cfg.spi_threshold, self.cfg.spi_mode)
        rel_err_before = report.rel_err[-1] if report.rel_err else report.rel_err0
        event = SpiEvent(
            iteration=iteration,
            added_U=list(result.added_U),
            added_T=list(result.added_T),
            phi_before=result.phi_before,
            phi_after=result.phi_after,
            rel_err_before=rel_err_before,
            warnings=list(result.warnings),
        )
        if not result.changed:
            report.spi_events.append(event)
            logger.debug(f"SPI at iteration {iteration}: pattern unchanged")
            return state
        for warning in result.warnings:
            logger.warning(f"⚠️ {warning}")

        try:
            if self.tag is Formulation.EXP_UNDER:
                candidate = result.point  # dropping t only loosens sum_k t <= V
            else:
                P = to_factors(result.point)
                candidate = from_factors(P.W, P.H, self.tag, self.V_work, result.pattern,
                                         delta=config.INTERIOR_DELTA, factor_bound=self.bound)
            new_state = self._state_for(result.pattern, candidate)
            start = phase1(new_state.program, self.cfg.solver, to_vector(candidate, new_state.layout))
        except ConicNMFError as exc:
            logger.warning(f"⚠️ SPI at iteration {iteration} rolled back: {exc}")
            report.spi_events.append(event.model_copy(update={"rolled_back": True}))
            return state
        if not start.feasible:
            logger.warning(f"⚠️ SPI at iteration {iteration} rolled back: reduced set infeasible "
                           f"(phase-I value {start.infeasibility:.3e})")
            report.spi_events.append(event.model_copy(update={"rolled_back": True, "phase1": True}))
            return state
        if start.moved:
            new_state.Z = from_vector(start.z, self.tag, result.pattern, new_state.layout)
        report.spi_events.append(event.model_copy(update={"phase1": start.moved, "phi_after": phi(new_state.Z)}))
        logger.info(f"SPI at iteration {iteration}: zeroed {len(result.added_U)} W and "
                    f"{len(result.added_T)} H entries (relative error {rel_err_before:.3e})")
        return new_state

    def _lmo(self, state: _State, gradient: Gradient, report: RunReport) -> LatentPoint:
        program = state.program.with_objective(objective_vector(gradient, state.layout))
        solution = solve(program, self.cfg.solver, warm_start=self._warm_start(state))
        report.solver_stats.append(IterationStats(
            status=solution.status.value,
            outer_iterations=solution.outer_iterations,
            newton_steps=solution.newton_steps,
            objective=solution.objective,
            complementarity=solution.complementarity,
            seconds=solution.seconds,
        ))
        if solution.status is SolverStatus.ITER_LIMIT:
            iteration = len(report.phi) + 1
            report.inexact_lmo.append(iteration)
            logger.warning(f"⚠️ LMO at iteration {iteration} hit the outer iteration limit; its gap may be understated "
                           f"(complementarity {solution.complementarity:.3e})")
        elif solution.status is not SolverStatus.OPTIMAL:
            raise _Abort(f"LMO {solution.status.value}: {solution.message}")
        return from_vector(solution.z, self.tag, state.pattern, state.layout)

    # --- main loop ---

    def execute(self) -> RunReport:
        started = time.perf_counter()
        cfg = self.cfg
        F, N = self.V.shape
        P0, init_label = self._initial_factors()
        self._fit_bound(P0)
        pattern = SparsityPattern.empty(F, self.K, N)
        Z0 = from_factors(P0.W, P0.H, self.tag, self.V_work, pattern, factor_bound=self.bound)
        state = self._state_for(pattern, Z0)
        schedule = cfg.resolved_spi_schedule()

        report = RunReport(
            instance=self.V.name,
            rows=F,
            cols=N,
            rank=self.K,
            formulation=self.tag.value,
            step_rule=cfg.step_rule.value,
            seed=cfg.seed,
            initializer=init_label,
            maxiter=cfg.maxiter,
            spi_schedule=list(schedule),
            spi_threshold=cfg.spi_threshold,
            factor_bound=self.bound,
            zero_shift=self.zero_shift,
            phi0=phi(Z0),
            phi_lb=phi_lower_bound(self.V_work, self.tag),
            rel_err0=self._rel_err(Z0),
        )
        logger.info(f"🚀 {self.V.name} K={self.K} form={self.tag.value} step={cfg.step_rule.value} "
                    f"seed={cfg.seed} init={init_label}")

        pre_spi: Optional[_State] = None
        min_gap = math.inf
        try:
            for i in range(1, cfg.maxiter + 1):
                if i in schedule:
                    before = state
                    state = self._apply_spi(i, state, report)
                    pre_spi = before if state is not before else None

                gradient = grad_phi(state.Z)
                try:
                    Y = self._lmo(state, gradient, report)
                except _Abort:
                    if pre_spi is None or report.solver_stats[-1].status != SolverStatus.INFEASIBLE.value:
                        raise
                    logger.warning(f"⚠️ LMO infeasible after SPI; restoring the pattern from before iteration {i}")
                    last = next(e for e in reversed(report.spi_events) if not e.rolled_back and (e.added_U or e.added_T))
                    report.spi_events[report.spi_events.index(last)] = last.model_copy(update={"rolled_back": True})
                    state, pre_spi = pre_spi, None
                    gradient = grad_phi(state.Z)
                    Y = self._lmo(state, gradient, report)
                # rollback is only for the first subproblem on a freshly reduced set
                pre_spi = None

                gap = fw_gap(gradient, state.Z, Y)
                tau = cfg.tau(i)
                state.Z = combine(state.Z, Y, tau)
                min_gap = min(min_gap, gap)
                rel_err = self._rel_err(state.Z)
                report.phi.append(phi(state.Z))
                report.gap.append(gap)
                report.min_gap.append(min_gap)
                report.rel_err.append(rel_err)
                report.tau.append(tau)
                if self.callback is not None:
                    self.callback(i, state.Z, report)
                if cfg.early_stop and rel_err <= cfg.success_tol:
                    break
        except (_Abort, ConicNMFError) as exc:
            report.status = RunStatus.ABORTED
            report.abort_reason = str(exc)
            logger.debug(f"run aborted at iteration {len(report.phi) + 1}", exc_info=True)

        factors = to_factors(state.Z)
        error = relative_error(self.V, factors)
        report.rel_err_before_refine = error
        if report.status != RunStatus.ABORTED and self._should_refine(error):
            factors = refine(self.V, factors.W, factors.H, cfg.hals)
            report.refined = True
            error = relative_error(self.V, factors)

        report.W = factors.W.tolist()
        report.H = factors.H.tolist()
        report.final_rel_err = error
        report.success = error <= cfg.success_tol
        if report.status != RunStatus.ABORTED:
            report.status = RunStatus.SUCCESS if report.success else RunStatus.COMPLETED
        report.rate_check_passed = rate_check(report) if report.status != RunStatus.ABORTED else None
        report.wall_time = time.perf_counter() - started

        if report.status == RunStatus.SUCCESS:
            logger.info(f"✅ {self.V.name}: relative error {error:.3e} after {report.iterations} iterations")
        elif report.status == RunStatus.COMPLETED:
            logger.info(f"⚠️ {self.V.name}: relative error {error:.3e} after {report.iterations} iterations")
        else:
            logger.warning(f"❌ {self.V.name}: aborted ({report.abort_reason})")
        return report

    def _should_refine(self, error: float) -> bool:
        mode = self.cfg.refine
        if mode is RefineMode.ON:
            return True
        if mode is RefineMode.OFF:
            return False
        if self.tag is Formulation.EXP_UNDER:
            return True
        return self.cfg.success_tol < error <= 1e-4


def run(
    V: Union[NonnegMatrix, npt.ArrayLike],
    K: int,
    tag: Union[Formulation, str],
    config: Optional[DriverConfig] = None,
    init: Initializer = None,
    callback: Optional[Callback] = None,
) -> RunReport:
    """Factorize V at rank K with the exp (WH <= V) or soc (WH >= V) formulation.

    Solver failures end the run with status "aborted" and the partial trace; invalid inputs raise.
    """
    return FrankWolfeRun(V, K, tag, config, init, callback).execute()
