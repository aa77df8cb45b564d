"""Tests for the conic program data model: validation, cone membership and the debug dump."""

import io
import math

import numpy as np
import pytest

from conic_nmf.conic_program import (
    Cone,
    ConeKind,
    ConicProgram,
    cone_distance,
    dump_program,
    membership,
    validate,
)


def _program(cones, nrows=6, nvars=2, c=None):
    return ConicProgram(
        nvars=nvars,
        c=np.zeros(nvars) if c is None else c,
        G=np.zeros((nrows, nvars)),
        h=np.ones(nrows),
        cones=cones,
    )


class TestValidate:
    def test_exact_partition(self):
        program = _program([Cone.exp3((0, 1, 2)), Cone.rsoc3((3, 4, 5))])
        assert validate(program) == []

    def test_overlapping_blocks(self):
        program = _program([Cone.exp3((0, 1, 2)), Cone.rsoc3((2, 3, 4)), Cone.ray(5)])
        diagnostics = validate(program)
        assert any("row 2" in d for d in diagnostics)

    def test_objective_length(self):
        program = _program([Cone.exp3((0, 1, 2)), Cone.rsoc3((3, 4, 5))], c=np.zeros(3))
        assert any("objective" in d for d in validate(program))

    def test_uncovered_row(self):
        program = _program([Cone.exp3((0, 1, 2)), Cone.ray(3)])
        assert any("not covered" in d for d in validate(program))

    def test_wrong_block_size(self):
        program = _program([Cone(ConeKind.EXP3, (0, 1)), Cone.ray(2)], nrows=3)
        assert any("expected 3" in d for d in validate(program))

    def test_empty_box(self):
        program = _program([Cone.box(0, lower=1.0, upper=0.0)], nrows=1)
        assert any("empty box" in d for d in validate(program))

    def test_crossed_variable_bounds(self):
        program = ConicProgram(nvars=1, c=[0.0], G=[[1.0]], h=[1.0], cones=[Cone.ray(0)],
                               lower=[2.0], upper=[1.0])
        assert any("lower bound above upper" in d for d in validate(program))

    def test_with_objective_shares_cache(self):
        program = _program([Cone.exp3((0, 1, 2)), Cone.rsoc3((3, 4, 5))])
        program.cache["marker"] = 1
        other = program.with_objective([1.0, 2.0])
        assert other.cache is program.cache
        np.testing.assert_array_equal(other.c, [1.0, 2.0])
        np.testing.assert_array_equal(program.c, [0.0, 0.0])


class TestMembership:
    def test_exp_boundary(self):
        assert membership(ConeKind.EXP3, [math.e, 1.0, 1.0])

    def test_exp_closure_branch(self):
        assert membership(ConeKind.EXP3, [1.0, 0.0, -1.0])

    def test_exp_outside(self):
        assert not membership(ConeKind.EXP3, [1.0, 1.0, 1.0])
        assert not membership(ConeKind.EXP3, [1.0, 0.0, 1.0])

    def test_rsoc_boundary(self):
        assert membership(ConeKind.RSOC3, [1.0, 0.5, 1.0])

    def test_rsoc_outside(self):
        assert not membership(ConeKind.RSOC3, [1.0, 0.5, 1.1])
        assert not membership(ConeKind.RSOC3, [-1.0, -1.0, 0.0])

    def test_ray_and_box(self):
        assert membership(Cone.ray(0), [0.0])
        assert not membership(Cone.ray(0), [-1e-3])
        box = Cone.box(0, lower=-1.0, upper=2.0)
        assert membership(box, [2.0])
        assert cone_distance(box, [3.5]) == pytest.approx(1.5)

    def test_exp_distance_positive_outside(self):
        # the origin is in the cone
        assert 0.0 < cone_distance(ConeKind.EXP3, [0.0, 1.0, 1.0]) <= math.sqrt(2.0)

    def test_wrong_dimension(self):
        with pytest.raises(ValueError):
            membership(ConeKind.RSOC3, [1.0, 2.0])

    @pytest.mark.parametrize("kind", [ConeKind.EXP3, ConeKind.RSOC3])
    def test_monotone_in_tolerance(self, kind):
        rng = np.random.default_rng(5)
        for x in rng.normal(size=(50, 3)):
            if membership(kind, x, 1e-3):
                assert membership(kind, x, 1e-1)

    def test_closed_under_scaling(self):
        rng = np.random.default_rng(6)
        for _ in range(30):
            x2, x3 = rng.uniform(0.5, 3.0), rng.uniform(-2.0, 2.0)
            exp_point = np.array([x2 * math.exp(x3 / x2), x2, x3])
            a, b = rng.uniform(0.1, 2.0), rng.normal()
            rsoc_point = np.array([a, b * b / (2.0 * a), b])
            for alpha in (0.1, 3.0, 50.0):
                assert membership(ConeKind.EXP3, alpha * exp_point, 1e-9 * alpha * np.linalg.norm(exp_point))
                assert membership(ConeKind.RSOC3, alpha * rsoc_point, 1e-9 * alpha * np.linalg.norm(rsoc_point))


class TestDump:
    def test_dump_lists_everything(self):
        program = ConicProgram(
            nvars=2,
            c=[1.0, 0.0],
            G=[[-1.0, 0.0], [0.0, 0.0], [0.0, -1.0], [1.0, 1.0]],
            h=[0.0, 1.0, 0.0, 4.0],
            cones=[Cone.exp3((0, 1, 2)), Cone.box(3, lower=0.0, upper=10.0)],
            lower=[0.0, -np.inf],
            upper=[5.0, np.inf],
            name="tiny",
        )
        buffer = io.StringIO()
        dump_program(program, buffer)
        text = buffer.getvalue()
        assert text.startswith("# conic program tiny")
        assert "nnz 4" in text
        assert "0 exp3 0 1 2" in text
        assert "1 box 3 0 10" in text
        assert "0 0 5" in text

    def test_dump_to_path(self, tmp_path):
        program = _program([Cone.exp3((0, 1, 2)), Cone.rsoc3((3, 4, 5))])
        path = tmp_path / "program.txt"
        dump_program(program, path)
        assert "cones" in path.read_text(encoding="utf-8")
