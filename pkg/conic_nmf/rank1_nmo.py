"""
Rank-One Nonnegative Matrix Over-Approximation
minimize sum_n t_n  s.t.  t_n >= u_f V_fn,  (u_f, y_f, sqrt 2) in Q_r,  sum_f y_f <= 1
over 2F + N variables. With w_f = 1/u_f (normalized to sum 1) and h_n = max_f V_fn / w_f,
w h^T is the cheapest rank-one matrix lying above V. Also provides the perturbed rank-one
initializer for the factorization driver.
"""

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp

import conic_nmf.config as config
from conic_nmf.conic_program import Cone, ConicProgram
from conic_nmf.exceptions import InvalidInputError
from conic_nmf.instances import FactorPair, NonnegMatrix, as_array
from conic_nmf.ipm_solver import SolverConfig, SolverStatus, solve
from conic_nmf.logger import logger

FloatArray = npt.NDArray[np.float64]

U_UPPER = 1e8


@dataclass(frozen=True, eq=False)
class Rank1Solution:
    u: FloatArray
    y: FloatArray
    tvals: FloatArray
    w: FloatArray
    h: FloatArray
    objective: float
    solver_objective: float
    status: SolverStatus
    notes: Tuple[str, ...] = field(default_factory=tuple)

    def factors(self) -> FactorPair:
        return FactorPair(W=self.w[:, None], H=self.h[None, :])

    def as_dict(self) -> Dict[str, Any]:
        return {
            "w": self.w.tolist(),
            "h": self.h.tolist(),
            "objective": self.objective,
            "solver_objective": self.solver_objective,
            "status": self.status.value,
            "notes": list(self.notes),
        }


def build_rank1_program(V: Union[NonnegMatrix, npt.ArrayLike]) -> ConicProgram:
    """Variables [u (F), y (F), t (N)]; F rotated cones, F*N rays and one budget row."""
    Vm = as_array(V)
    F, N = Vm.shape
    u_col = np.arange(F)
    y_col = F + np.arange(F)
    t_col = 2 * F + np.arange(N)

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    # row 0: 1 - sum_f y_f >= 0
    rows.append(np.zeros(F, dtype=np.int64))
    cols.append(y_col)
    vals.append(np.ones(F))
    # rows 1 + 3f .. 3 + 3f: (u_f, y_f, sqrt 2)
    base = 1 + 3 * np.arange(F)
    rows += [base, base + 1]
    cols += [u_col, y_col]
    vals += [-np.ones(F), -np.ones(F)]
    h = np.zeros(1 + 3 * F + F * N)
    h[0] = 1.0
    h[base + 2] = math.sqrt(2.0)
    # rows 1 + 3F + f*N + n: t_n - V_fn u_f >= 0
    ff, nn = np.meshgrid(np.arange(F), np.arange(N), indexing="ij")
    ray_rows = 1 + 3 * F + (ff * N + nn).ravel()
    rows += [ray_rows, ray_rows]
    cols += [t_col[nn.ravel()], u_col[ff.ravel()]]
    vals += [-np.ones(F * N), Vm.ravel()]

    nvars = 2 * F + N
    G = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(h.size, nvars),
    )
    cones = [Cone.ray(0)]
    cones += [Cone.rsoc3((int(b), int(b) + 1, int(b) + 2)) for b in base]
    cones += [Cone.ray(int(r)) for r in ray_rows]
    c = np.zeros(nvars)
    c[t_col] = 1.0
    lower = np.full(nvars, -np.inf)
    upper = np.full(nvars, np.inf)
    lower[u_col] = 0.0
    upper[u_col] = U_UPPER
    return ConicProgram(nvars=nvars, c=c, G=G, h=h, cones=tuple(cones), lower=lower, upper=upper,
                        name=f"rank1_nmo_{F}x{N}")


def solve_rank1(
    V: Union[NonnegMatrix, npt.ArrayLike],
    solver_config: Optional[SolverConfig] = None,
) -> Rank1Solution:
    """Globally optimal rank-one over-approximation w h^T >= V with sum(w) = 1."""
    Vm = as_array(V)
    if Vm.ndim != 2 or Vm.size == 0:
        raise InvalidInputError(f"expected a non-empty matrix, got shape {Vm.shape}")
    if not np.all(np.isfinite(Vm)) or (Vm < 0).any():
        raise InvalidInputError("rank-one over-approximation needs a finite nonnegative matrix")
    F, N = Vm.shape
    if not Vm.any():
        raise InvalidInputError("the all-zero matrix has no informative over-approximation")

    program = build_rank1_program(Vm)
    u0 = np.full(F, 2.0 * F)
    warm = np.concatenate([u0, np.full(F, 0.9 / F), (u0[:, None] * Vm).max(axis=0) + 1.0])
    solution = solve(program, solver_config, warm_start=warm)
    if solution.status is not SolverStatus.OPTIMAL:
        logger.warning(f"⚠️ rank-one NMO solve ended with status {solution.status.value}: {solution.message}")

    notes: List[str] = []
    u_raw = np.clip(solution.z[:F], 1.0 / U_UPPER, U_UPPER)
    for f in np.flatnonzero(~Vm.any(axis=1)):
        notes.append(f"row {int(f)} of V is zero; w[{int(f)}] is limited only by the u bound {U_UPPER:g}")
    w = 1.0 / u_raw
    w = w / w.sum()
    h = (Vm / w[:, None]).max(axis=0)
    return Rank1Solution(
        u=1.0 / w,
        y=w.copy(),
        tvals=h.copy(),
        w=w,
        h=h,
        objective=float(h.sum()),
        solver_objective=solution.objective,
        status=solution.status,
        notes=tuple(notes),
    )


def perturbed_init(
    V: Union[NonnegMatrix, npt.ArrayLike],
    K: int,
    d: float = config.PERTURBATION_D,
    seed: Optional[Union[int, np.random.SeedSequence]] = None,
    rank1: Optional[Rank1Solution] = None,
) -> FactorPair:
    """Rank-one NMO replicated over K components plus d R ||.||_F / ||R||_F uniform noise.

    W repeats w in every column and H repeats h / K in every row, so W H = w h^T before the noise.
    The noise is added to the factors W and H, not to the latent point built from them: under the
    soc form U = W^2, so a relative factor perturbation d moves U by about 2d. Both forms get the
    same starting factors this way.
    """
    if not d > 0:
        raise InvalidInputError(f"perturbation size d must be positive, got {d}")
    if K < 1:
        raise InvalidInputError(f"rank K must be positive, got {K}")
    base = rank1 or solve_rank1(V)
    W0 = np.repeat(base.w[:, None], K, axis=1)
    H0 = np.repeat(base.h[None, :] / K, K, axis=0)
    rng = np.random.default_rng(seed)
    R_W = 1.0 - rng.random(W0.shape)
    R_H = 1.0 - rng.random(H0.shape)
    W = W0 + d * R_W * np.linalg.norm(W0) / np.linalg.norm(R_W)
    H = H0 + d * R_H * np.linalg.norm(H0) / np.linalg.norm(R_H)
    return FactorPair(W=W, H=H)
