"""Tests for the rank-one over-approximation and the perturbed initializer."""

import itertools

import numpy as np
import pytest
from scipy.optimize import minimize

from conic_nmf.conic_program import ConeKind, membership
from conic_nmf.exceptions import InvalidInputError
from conic_nmf.instances import gen_random_product, relative_error
from conic_nmf.ipm_solver import SolverStatus, solve
from conic_nmf.rank1_nmo import build_rank1_program, perturbed_init, solve_rank1


def _tight_objective(V, w):
    """sum_n max_f V_fn / w_f for one weight vector (rows of w for a batch)."""
    w = np.atleast_2d(w)
    return (V[None, :, :] / w[:, :, None]).max(axis=1).sum(axis=1)


def _simplex_grid(F, steps):
    points = [c for c in itertools.product(range(1, steps), repeat=F - 1) if sum(c) < steps]
    grid = np.array([[*c, steps - sum(c)] for c in points], dtype=float)
    return grid / steps


def _oracle(V, steps=30):
    """Best simplex grid point, polished by SLSQP on min sum t s.t. t_n >= u_f V_fn, sum 1/u_f <= 1."""
    F, N = V.shape
    grid = _simplex_grid(F, steps)
    values = _tight_objective(V, grid)
    w0 = grid[int(np.argmin(values))]
    u0 = 1.0 / w0
    x0 = np.concatenate([u0, (u0[:, None] * V).max(axis=0)])
    constraints = [
        {"type": "ineq", "fun": lambda x: (x[F:][None, :] - x[:F, None] * V).ravel()},
        {"type": "ineq", "fun": lambda x: np.array([1.0 - np.sum(1.0 / x[:F])])},
    ]
    bounds = [(1.0, None)] * F + [(0.0, None)] * N
    result = minimize(lambda x: np.sum(x[F:]), x0, method="SLSQP", bounds=bounds, constraints=constraints,
                      options={"ftol": 1e-14, "maxiter": 1000})
    w = 1.0 / result.x[:F]
    polished = float(_tight_objective(V, w / w.sum())[0])
    return min(polished, float(values.min()))


class TestSolveRank1:
    def test_identity(self):
        solution = solve_rank1(np.eye(2))
        assert solution.status is SolverStatus.OPTIMAL
        assert solution.objective == pytest.approx(4.0, abs=1e-6)
        np.testing.assert_allclose(solution.w, [0.5, 0.5], atol=1e-4)
        np.testing.assert_allclose(solution.h, [2.0, 2.0], atol=1e-3)

    def test_identity_program_objective(self):
        solution = solve(build_rank1_program(np.eye(2)))
        assert solution.status is SolverStatus.OPTIMAL
        assert solution.objective == pytest.approx(4.0, abs=1e-6)

    def test_program_size(self):
        F, N = 4, 3
        program = build_rank1_program(np.ones((F, N)))
        assert program.nvars == 2 * F + N
        assert len(program.cones) == F * (1 + N) + 1
        assert sum(cone.kind is ConeKind.RSOC3 for cone in program.cones) == F

    def test_rank_one_input_is_exact(self):
        V = gen_random_product(5, 4, 1, seed=2)
        solution = solve_rank1(V)
        assert relative_error(V, solution.factors()) <= 1e-6
        assert solution.objective == pytest.approx(float(V.entries.sum()) / float(solution.w.sum()), rel=1e-6)

    def test_matches_grid_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            V = rng.uniform(0.05, 1.0, size=(4, 3))
            objective = solve_rank1(V).objective
            reference = _oracle(V)
            assert objective <= reference * (1.0 + 1e-9)
            assert objective == pytest.approx(reference, rel=1e-4)

    def test_beats_random_candidates(self):
        rng = np.random.default_rng(1)
        V = rng.uniform(0.0, 1.0, size=(5, 4))
        objective = solve_rank1(V).objective
        candidates = rng.dirichlet(np.ones(5), size=1000)
        assert objective <= _tight_objective(V, candidates).min() + 1e-9

    def test_solution_invariants(self):
        V = np.random.default_rng(2).uniform(0.0, 1.0, size=(4, 6))
        solution = solve_rank1(V)
        assert solution.w.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(np.outer(solution.w, solution.h) >= V - 1e-9)
        assert solution.y.sum() <= 1.0 + 1e-9
        for u, y in zip(solution.u, solution.y):
            assert membership(ConeKind.RSOC3, [u, y, np.sqrt(2.0)], tol=1e-9)
        # eliminated form: sum_n max_f u_f V_fn
        assert float((solution.u[:, None] * V).max(axis=0).sum()) == pytest.approx(solution.objective, rel=1e-9)
        assert solution.solver_objective == pytest.approx(solution.objective, rel=1e-6)

    def test_scale_covariance(self):
        V = np.random.default_rng(3).uniform(0.1, 1.0, size=(4, 3))
        base = solve_rank1(V)
        scaled = solve_rank1(7.5 * V)
        assert scaled.objective == pytest.approx(7.5 * base.objective, rel=1e-7)
        np.testing.assert_allclose(scaled.w, base.w, atol=1e-4)

    def test_zero_row_is_noted(self):
        solution = solve_rank1(np.array([[1.0, 2.0], [0.0, 0.0]]))
        assert solution.notes
        assert solution.objective == pytest.approx(3.0, rel=1e-4)

    @pytest.mark.parametrize("V", [np.zeros((2, 2)), -np.ones((2, 2)), np.array([[np.nan, 1.0]])])
    def test_rejects_bad_input(self, V):
        with pytest.raises(InvalidInputError):
            solve_rank1(V)

    def test_json_payload(self):
        payload = solve_rank1(np.eye(2)).as_dict()
        assert set(payload) >= {"w", "h", "objective", "status"}
        assert payload["status"] == "optimal"


class TestPerturbedInit:
    @pytest.fixture(scope="class")
    def hexagon(self):
        V = np.array([[0, 1, 2, 2, 1, 0], [0, 0, 1, 2, 2, 1], [1, 0, 0, 1, 2, 2],
                      [2, 1, 0, 0, 1, 2], [2, 2, 1, 0, 0, 1], [1, 2, 2, 1, 0, 0]], dtype=float)
        return V, solve_rank1(V)

    def test_zero_noise_limit(self, hexagon):
        V, base = hexagon
        P = perturbed_init(V, 4, d=1e-12, seed=0, rank1=base)
        for k in range(4):
            np.testing.assert_allclose(P.W[:, k], base.w, rtol=1e-9)
        np.testing.assert_allclose(P.product(), np.outer(base.w, base.h), rtol=1e-9)

    def test_deterministic(self, hexagon):
        V, base = hexagon
        a = perturbed_init(V, 5, seed=11, rank1=base)
        b = perturbed_init(V, 5, seed=11, rank1=base)
        c = perturbed_init(V, 5, seed=12, rank1=base)
        np.testing.assert_array_equal(a.W, b.W)
        np.testing.assert_array_equal(a.H, b.H)
        assert not np.array_equal(a.W, c.W)

    def test_strictly_positive(self, hexagon):
        V, base = hexagon
        P = perturbed_init(V, 5, seed=3, rank1=base)
        assert P.W.min() > 0 and P.H.min() > 0

    def test_noise_scale(self, hexagon):
        V, base = hexagon
        d = 0.03
        P = perturbed_init(V, 3, d=d, seed=4, rank1=base)
        W0 = np.repeat(base.w[:, None], 3, axis=1)
        assert np.linalg.norm(P.W - W0) == pytest.approx(d * np.linalg.norm(W0), rel=1e-12)

    @pytest.mark.parametrize("d", [0.0, -0.1])
    def test_rejects_nonpositive_d(self, hexagon, d):
        V, base = hexagon
        with pytest.raises(InvalidInputError):
            perturbed_init(V, 2, d=d, rank1=base)
