"""Tests for the campaign harness: seeding, output layout, aggregation and gap traces."""

import csv
import json

import pytest
from pydantic import ValidationError

from conic_nmf.campaign import (
    Campaign,
    InstanceSpec,
    format_table_row,
    gaptrace,
    run_campaign,
    run_seeds,
)
import conic_nmf.config as config
from conic_nmf.exceptions import InvalidInputError
from conic_nmf.formulations import Formulation
from conic_nmf.fw_driver import DriverConfig, InitializerSpec, RefineMode, run
from conic_nmf.instances import builtin_matrix, gen_random_product, save_matrix
from conic_nmf.schemas import CampaignSummary


def _quick_driver(**overrides):
    settings = dict(maxiter=3, spi_schedule=(), refine=RefineMode.OFF)
    settings.update(overrides)
    return DriverConfig(**settings)


def _campaign(out_dir, n_inits=2, **overrides):
    return Campaign(
        instance=InstanceSpec(random=(4, 4, 2)),
        n_inits=n_inits,
        driver=_quick_driver(),
        out_dir=out_dir,
        master_seed=7,
        jobs=1,
        **overrides,
    )


def _summary(form, successes, n_inits=20):
    return CampaignSummary(
        instance="hex_a2", rows=6, cols=6, rank=3, formulation=form, initializer="uniform", step_rule="unit",
        maxiter=750, n_inits=n_inits, successes=successes, seeds=[], final_errors=[], iterations=[],
    )


class TestSeeds:
    def test_deterministic_and_distinct(self):
        seeds = run_seeds(42, 5)
        assert seeds == run_seeds(42, 5)
        assert len(set(seeds)) == 5
        assert seeds[:3] == run_seeds(42, 3)
        assert seeds != run_seeds(43, 5)


class TestInstanceSpec:
    def test_exactly_one_source(self):
        with pytest.raises(ValidationError):
            InstanceSpec()
        with pytest.raises(ValidationError):
            InstanceSpec(builtin="hex_a2", random=(3, 3, 1))

    def test_labels(self):
        assert InstanceSpec(random=(10, 10, 5)).label == "random_10x10_k5"
        assert InstanceSpec(builtin="V_a", a=2.5).label == "V_a_a2.5"
        assert InstanceSpec(builtin="Vinf1").label == "Vinf1"

    def test_random_instances_regenerate(self):
        spec = InstanceSpec(random=(4, 4, 2))
        assert spec.regenerates
        assert spec.rank() == 2
        assert not (spec.load(1).entries == spec.load(2).entries).all()

    def test_catalog_rank(self):
        assert InstanceSpec(builtin="hex_a2").rank() == 3

    def test_csv_without_rank_needs_k(self, tmp_path):
        path = save_matrix(gen_random_product(3, 3, 1, seed=0), tmp_path / "m.csv")
        campaign = Campaign(instance=InstanceSpec(matrix_path=path), out_dir=tmp_path, jobs=1)
        with pytest.raises(InvalidInputError):
            campaign.resolved_rank()
        assert campaign.model_copy(update={"rank": 2}).resolved_rank() == 2


class TestRunCampaign:
    def test_output_layout(self, tmp_path):
        summaries = run_campaign(_campaign(tmp_path))
        assert len(summaries) == 1
        summary = summaries[0]
        assert summary.n_inits == 2
        assert len(summary.final_errors) == 2 and len(summary.seeds) == 2
        form_dir = tmp_path / "random_4x4_k2_K2" / "soc_uniform"
        for index in range(2):
            run_dir = form_dir / f"run_{index:03d}"
            assert (run_dir / "report.json").is_file()
            assert (run_dir / "trace.csv").is_file()
        assert (form_dir / "summary.json").is_file()
        timing = json.loads((form_dir / "timing.json").read_text(encoding="utf-8"))
        assert len(timing["run_times"]) == 2

    def test_summary_is_reproducible(self, tmp_path):
        run_campaign(_campaign(tmp_path / "a"))
        run_campaign(_campaign(tmp_path / "b"))
        relative = "random_4x4_k2_K2/soc_uniform/summary.json"
        assert (tmp_path / "a" / relative).read_bytes() == (tmp_path / "b" / relative).read_bytes()

    def test_single_run_summary_matches_report(self, tmp_path):
        summary = run_campaign(_campaign(tmp_path, n_inits=1))[0]
        report = json.loads(
            (tmp_path / "random_4x4_k2_K2" / "soc_uniform" / "run_000" / "report.json").read_text(encoding="utf-8")
        )
        assert summary.final_errors == [report["final_rel_err"]]
        assert summary.iterations == [len(report["phi"])]
        assert summary.seeds == [run_seeds(7, 1)[0][0]]
        assert summary.successes == int(report["success"])

    def test_both_forms(self, tmp_path):
        campaign = _campaign(tmp_path, n_inits=1, forms=(Formulation.EXP_UNDER, Formulation.SOC_OVER))
        summaries = run_campaign(campaign)
        assert [s.formulation for s in summaries] == ["exp", "soc"]
        assert (tmp_path / "random_4x4_k2_K2" / "exp_uniform" / "summary.json").is_file()


class TestTableRow:
    def test_format(self):
        row = format_table_row([_summary("exp", 20), _summary("soc", 19)])
        assert row == "hex_a2 | K=3 | uniform | exp 20/20 | soc 19/20"

    def test_empty(self):
        assert format_table_row([]) == ""

    def test_successes_bounded(self):
        with pytest.raises(ValidationError):
            _summary("soc", 21)


class TestGapTrace:
    def test_csv(self, tmp_path):
        V = gen_random_product(4, 4, 2, seed=3)
        path, reports = gaptrace(V, 2, Formulation.SOC_OVER, _quick_driver(maxiter=4, seed=5), tmp_path)
        assert set(reports) == {"unit", "adaptive"}
        with path.open(encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["iter", "min_gap_unit", "min_gap_adaptive", "ref_unit", "ref_adaptive"]
        assert len(rows) == 5
        unit = reports["unit"]
        assert float(rows[1][1]) == unit.min_gap[0]
        assert float(rows[2][3]) == pytest.approx((unit.phi0 - unit.phi_lb) / 3.0)
        adaptive = reports["adaptive"]
        assert float(rows[1][4]) == pytest.approx((adaptive.phi0 - adaptive.phi_lb) / (2.0 / 5.0 * 2.0))
        assert reports["unit"].phi0 == reports["adaptive"].phi0
        assert (tmp_path / "unit" / "trace.csv").is_file()


@pytest.mark.slow
class TestSuccessCounts:
    """Desk-scale campaigns; counts are stochastic, thresholds are lower bands."""

    @staticmethod
    def _run(tmp_path, instance, forms=(Formulation.SOC_OVER,), n_inits=20, driver=None, **kwargs):
        return run_campaign(Campaign(
            instance=instance,
            forms=forms,
            n_inits=n_inits,
            driver=driver or DriverConfig(),
            out_dir=tmp_path,
            jobs=config.CONIC_NMF_JOBS,
            **kwargs,
        ))

    def test_random_products(self, tmp_path):
        (summary,) = self._run(tmp_path, InstanceSpec(random=(10, 10, 5)))
        assert summary.successes >= 19
        assert summary.rate_check_failures == 0

    @pytest.mark.parametrize("name,rank", [("hex_a2", 3), ("hex_a3", 4)])
    def test_easy_hexagons(self, tmp_path, name, rank):
        forms = (Formulation.EXP_UNDER, Formulation.SOC_OVER)
        summaries = self._run(tmp_path, InstanceSpec(builtin=name), forms=forms, rank=rank)
        assert [s.successes for s in summaries] == [20, 20]

    def test_hard_hexagon(self, tmp_path):
        (summary,) = self._run(tmp_path, InstanceSpec(builtin="hex_ainf"))
        assert summary.successes > 0

    def test_rigid_matrix(self, tmp_path):
        driver = DriverConfig(maxiter=config.MAXITER_RIGID)
        (summary,) = self._run(tmp_path, InstanceSpec(builtin="Vinf2"), n_inits=30, driver=driver)
        assert summary.successes > 0

    def test_rank1_initializer_beats_uniform(self, tmp_path):
        counts = {}
        for label in ("uniform", "rank1:0.03"):
            (summary,) = self._run(tmp_path / label.replace(":", "_"), InstanceSpec(builtin="hex_ainf"), n_inits=30,
                                   initializer=InitializerSpec.parse(label), master_seed=11)
            counts[label] = summary.successes
        assert counts["rank1:0.03"] > counts["uniform"]

    def test_single_late_spi(self):
        driver = DriverConfig(maxiter=500, spi_schedule=(400,), spi_threshold=1e-3,
                              early_stop=False, refine=RefineMode.OFF)
        reports = [run(builtin_matrix("appB_example"), 5, "soc", driver.model_copy(update={"seed": seed}))
                   for seed in range(10)]
        successes = [r for r in reports if r.success]
        assert successes
        for report in successes:
            assert report.iterations == 500 and not report.refined
            (event,) = [e for e in report.spi_events if e.iteration == 400]
            assert not event.rolled_back and (event.added_U or event.added_T)
            # rel_err[i - 1] is the error after iteration i
            assert event.rel_err_before == report.rel_err[398]
            assert event.rel_err_before >= 10.0 * report.final_rel_err

    def test_unit_step_min_gap_dominates(self, tmp_path):
        V = builtin_matrix("hex_a2")
        driver = DriverConfig(maxiter=200, spi_schedule=(), refine=RefineMode.OFF)
        wins = 0
        seeds = range(10)
        for seed in seeds:
            _, reports = gaptrace(V, 3, Formulation.SOC_OVER, driver.model_copy(update={"seed": seed}),
                                  tmp_path / f"s{seed}", jobs=config.CONIC_NMF_JOBS)
            wins += reports["unit"].min_gap[-1] <= reports["adaptive"].min_gap[-1]
        assert wins >= 0.8 * len(seeds)
