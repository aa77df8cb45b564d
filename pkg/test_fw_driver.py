"""Tests for the Frank-Wolfe driver: gap bookkeeping, descent, rate bound and run outputs."""

import csv
import dataclasses
import itertools
import math

import numpy as np
import pytest
from pydantic import ValidationError

from conic_nmf.exceptions import ContractViolation, InvalidInputError, UnsupportedInputError
from conic_nmf.formulations import Formulation, feasibility_violation, from_factors, grad_phi
from conic_nmf.fw_driver import (
    DriverConfig,
    InitializerSpec,
    RefineMode,
    StepRule,
    descent_violations,
    fw_gap,
    rate_check,
    run,
    write_trace_csv,
)
import conic_nmf.fw_driver as fw_driver
from conic_nmf.instances import FactorPair, builtin_matrix, gen_random_factors, gen_random_product
from conic_nmf.ipm_solver import ConicSolution, SolverStatus
from conic_nmf.schemas import RunStatus

FORMS = [Formulation.SOC_OVER, Formulation.EXP_UNDER]
RULES = [StepRule.UNIT, StepRule.ADAPTIVE]


def _small_config(rule=StepRule.UNIT, **overrides):
    settings = dict(maxiter=10, step_rule=rule, spi_schedule=(), refine=RefineMode.OFF, seed=1, early_stop=False)
    settings.update(overrides)
    return DriverConfig(**settings)


@pytest.fixture(scope="module")
def small_matrix():
    return gen_random_product(4, 4, 2, seed=0)


@pytest.fixture(scope="module")
def traced_runs(small_matrix):
    """(report, per-iteration feasibility violations) for every form and step rule."""
    out = {}
    for form, rule in itertools.product(FORMS, RULES):
        violations = []

        def record(i, Z, report, violations=violations):
            violations.append(feasibility_violation(Z, small_matrix))

        report = run(small_matrix, 2, form, _small_config(rule), callback=record)
        out[form, rule] = (report, violations)
    return out


def _failing_solve(monkeypatch, fail_on, status=SolverStatus.INFEASIBLE):
    """Make the listed (1-based) driver solves report `status`; an ITER_LIMIT keeps the real point."""
    real = fw_driver.solve
    calls = {"n": 0}

    def fake(program, config=None, warm_start=None):
        calls["n"] += 1
        if calls["n"] not in fail_on:
            return real(program, config, warm_start=warm_start)
        if status is SolverStatus.ITER_LIMIT:
            return dataclasses.replace(real(program, config, warm_start=warm_start), status=status)
        z = np.asarray(warm_start, dtype=np.float64)
        return ConicSolution(z=z, status=status, objective=float(program.c @ z),
                             complementarity=math.inf, primal_residual=0.0, message="forced")

    monkeypatch.setattr(fw_driver, "solve", fake)


@pytest.fixture
def structured_start():
    """V = WH with two structural zeros in W, and a start where those entries are 1e-6."""
    W = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, 1.0], [2.0, 1.0]])
    H = np.array([[1.0, 0.5, 1.5, 1.0], [0.5, 1.0, 1.0, 2.0]])
    start = W.copy()
    start[W == 0.0] = 1e-6
    return W @ H, FactorPair(W=start, H=H)


class TestConfig:
    def test_default_spi_schedule(self):
        assert DriverConfig(maxiter=750).resolved_spi_schedule() == (600, 713)
        assert DriverConfig(maxiter=750, spi_schedule=()).resolved_spi_schedule() == ()
        assert DriverConfig(spi_schedule=(5, 2, 5)).resolved_spi_schedule() == (2, 5)

    def test_step_sizes(self):
        unit = DriverConfig(step_rule=StepRule.UNIT)
        adaptive = DriverConfig(step_rule=StepRule.ADAPTIVE, maxiter=99)
        assert unit.tau(7) == 1.0 and unit.tau_tilde() == 1.0
        assert adaptive.tau(1) == 1.0
        assert adaptive.tau(3) == pytest.approx(0.5)
        assert adaptive.tau_tilde() == pytest.approx(0.02)

    def test_rejects_zero_based_schedule(self):
        with pytest.raises(ValidationError):
            DriverConfig(spi_schedule=(0, 10))

    def test_initializer_parse(self):
        assert InitializerSpec.parse("uniform").kind == "uniform"
        spec = InitializerSpec.parse("rank1:0.1")
        assert spec.kind == "rank1" and spec.d == pytest.approx(0.1)
        assert InitializerSpec.parse("rank1").d == pytest.approx(0.03)
        assert spec.label == "rank1:0.1"
        with pytest.raises(InvalidInputError):
            InitializerSpec.parse("gaussian")

    @pytest.mark.parametrize("text", ["rank1:abc", "rank1:-0.1", "rank1:0"])
    def test_initializer_parse_bad_d(self, text):
        with pytest.raises(InvalidInputError):
            InitializerSpec.parse(text)


class TestFwGap:
    def test_zero_at_the_iterate(self):
        P = gen_random_factors(3, 4, 2, seed=2)
        for form in FORMS:
            Z = from_factors(P.W, P.H, form)
            assert fw_gap(grad_phi(Z), Z, Z) == 0.0

    def test_negative_gap_is_a_contract_violation(self):
        P = gen_random_factors(3, 4, 2, seed=3)
        Z = from_factors(P.W, P.H, Formulation.SOC_OVER)
        larger = from_factors(2.0 * P.W, 2.0 * P.H, Formulation.SOC_OVER)
        with pytest.raises(ContractViolation):
            fw_gap(grad_phi(Z), Z, larger)


class TestRun:
    @pytest.mark.parametrize("form,rule", list(itertools.product(FORMS, RULES)))
    def test_trace_properties(self, traced_runs, form, rule):
        report, violations = traced_runs[form, rule]
        assert report.status != RunStatus.ABORTED
        assert report.iterations == 10
        assert descent_violations(report) == []
        assert rate_check(report)
        assert report.rate_check_passed
        assert np.all(np.diff(report.min_gap) <= 0.0)
        assert max(violations) <= 1e-7

    @pytest.mark.parametrize("form,rule", list(itertools.product(FORMS, RULES)))
    def test_gap_bounded_by_remaining_objective(self, traced_runs, form, rule):
        report, _ = traced_runs[form, rule]
        previous = [report.phi0, *report.phi[:-1]]
        for value, gap in zip(previous, report.gap):
            assert gap <= value - report.phi_lb + 1e-6 * max(1.0, abs(value))

    def test_adaptive_steps(self, traced_runs):
        report, _ = traced_runs[Formulation.SOC_OVER, StepRule.ADAPTIVE]
        np.testing.assert_allclose(report.tau, [2.0 / (i + 1.0) for i in range(1, 11)])

    def test_deterministic(self, small_matrix):
        a = run(small_matrix, 2, "soc", _small_config(maxiter=3))
        b = run(small_matrix, 2, "soc", _small_config(maxiter=3))
        assert a.phi == b.phi
        assert a.W == b.W

    def test_true_factors_are_stationary(self):
        P = gen_random_factors(5, 5, 2, seed=4)
        V = P.product()
        report = run(V, 2, "soc", _small_config(maxiter=2, refine=RefineMode.ON), init=P)
        assert report.rel_err0 < 1e-5
        assert report.gap[0] <= 1e-4 * max(1.0, abs(report.phi0))
        assert report.success
        assert report.status == RunStatus.SUCCESS

    def test_spi_event_recorded(self, small_matrix):
        report = run(small_matrix, 2, "soc", _small_config(maxiter=3, spi_schedule=(2,)))
        assert [e.iteration for e in report.spi_events] == [2]
        assert report.spi_schedule == [2]

    def test_infeasible_subproblem_after_spi_rolls_back(self, monkeypatch, structured_start):
        V, start = structured_start
        patterns = []
        _failing_solve(monkeypatch, {1})
        report = run(V, 2, "soc", _small_config(maxiter=4, spi_schedule=(1,)), init=start,
                     callback=lambda i, Z, r: patterns.append(Z.pattern))
        assert report.status != RunStatus.ABORTED
        (event,) = report.spi_events
        assert set(event.added_U) == {(0, 1), (2, 0)}
        assert event.rolled_back
        assert [s.status for s in report.solver_stats[:2]] == ["infeasible", "optimal"]
        assert report.iterations == 4
        assert all(p.u_alive.all() and p.T_alive.all() for p in patterns)
        assert descent_violations(report) == []

    def test_spi_kept_once_a_subproblem_succeeds(self, monkeypatch, structured_start):
        V, start = structured_start
        _failing_solve(monkeypatch, {3})
        report = run(V, 2, "soc", _small_config(maxiter=5, spi_schedule=(1,)), init=start)
        assert report.status == RunStatus.ABORTED
        assert report.iterations == 2
        (event,) = report.spi_events
        assert event.added_U and not event.rolled_back

    def test_iteration_limited_subproblem_is_recorded(self, monkeypatch, small_matrix):
        _failing_solve(monkeypatch, {2}, status=SolverStatus.ITER_LIMIT)
        report = run(small_matrix, 2, "soc", _small_config(maxiter=3))
        assert report.status != RunStatus.ABORTED
        assert report.inexact_lmo == [2]
        assert report.solver_stats[1].status == "iter_limit"

    def test_refine_on_improves_or_keeps_error(self, small_matrix):
        report = run(small_matrix, 2, "soc", _small_config(maxiter=3, refine=RefineMode.ON))
        assert report.refined
        assert report.final_rel_err <= report.rel_err_before_refine + 1e-12

    def test_rank1_initializer(self, small_matrix):
        report = run(small_matrix, 2, "soc", _small_config(maxiter=2), init=InitializerSpec.parse("rank1:0.05"))
        assert report.initializer == "rank1:0.05"
        assert report.status != RunStatus.ABORTED

    def test_exp_zeros_without_shift(self):
        V = builtin_matrix("hex_ainf")
        with pytest.raises(UnsupportedInputError):
            run(V, 5, "exp", _small_config(exp_zero_shift=0.0))

    def test_exp_zeros_with_shift(self):
        V = builtin_matrix("hex_ainf")
        report = run(V, 5, "exp", _small_config(maxiter=2))
        assert report.zero_shift > 0.0
        assert report.status != RunStatus.ABORTED

    def test_bad_rank(self, small_matrix):
        with pytest.raises(InvalidInputError):
            run(small_matrix, 0, "soc")

    def test_init_shape_mismatch(self, small_matrix):
        with pytest.raises(InvalidInputError):
            run(small_matrix, 2, "soc", _small_config(), init=gen_random_factors(4, 4, 3, seed=0))


class TestTraceCsv:
    def test_columns_and_rows(self, traced_runs, tmp_path):
        report, _ = traced_runs[Formulation.SOC_OVER, StepRule.UNIT]
        path = write_trace_csv(report, tmp_path / "trace.csv")
        with path.open(encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["iter", "phi", "gap", "min_gap", "rel_err", "spi_event"]
        assert rows[1][0] == "0"
        assert float(rows[1][1]) == report.phi0
        assert rows[1][2] == "" and rows[1][3] == ""
        assert len(rows) == report.iterations + 2
        assert float(rows[-1][3]) == report.min_gap[-1]


@pytest.mark.slow
class TestAcceptance:
    def test_random_10x10_rank5_soc(self):
        V = gen_random_product(10, 10, 5, seed=0)
        report = run(V, 5, "soc", DriverConfig(maxiter=750, seed=0))
        assert report.success

    @pytest.mark.parametrize("form", ["soc", "exp"])
    def test_hexagon_a2_rank3(self, form):
        report = run(builtin_matrix("hex_a2"), 3, form, DriverConfig(maxiter=750, seed=1))
        assert report.success

    def test_adaptive_rate_bound_on_hexagon(self):
        config = DriverConfig(maxiter=200, step_rule=StepRule.ADAPTIVE, seed=1, early_stop=False)
        report = run(builtin_matrix("hex_a2"), 3, "soc", config)
        assert rate_check(report, 2.0 / 201.0)
