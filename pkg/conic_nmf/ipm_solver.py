"""
Embedded Primal Barrier Interior-Point Solver

Solves ConicProgram instances by path following on

    c.z / mu + F(h - G z)

where F sums the self-concordant barriers of the slack blocks. Every constraint is first
reduced to one of three slack kinds (exp3 blocks, rsoc3 blocks, scalar rays): two-sided
box cones and variable bounds become pairs of rays. Phase-I augments the slack with an
auxiliary variable a along an interior direction e and minimizes a.
"""

import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, List, Optional, Tuple

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve

import conic_nmf.config as config
from conic_nmf.conic_program import ConeKind, ConicProgram, validate
from conic_nmf.exceptions import InvalidProgramError
from conic_nmf.logger import logger

FloatArray = npt.NDArray[np.float64]

# interior directions used by phase-I and by the margin test
_E_EXP = np.array([1.0, 1.0, -1.0])
_E_RSOC = np.array([1.0, 1.0, 0.0])


class SolverStatus(str, Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    ITER_LIMIT = "iter_limit"
    NUMERIC_FAILURE = "numeric_failure"


class SolverConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    mu0: float = Field(1.0, gt=0)
    theta: float = Field(0.2, gt=0, lt=1)
    newton_tol: float = Field(1e-10, gt=0)
    max_outer: int = Field(60, ge=1)
    max_newton_per_outer: int = Field(50, ge=1)
    line_search_beta: float = Field(0.5, gt=0, lt=1)
    fraction_to_boundary: float = Field(0.99, gt=0, lt=1)
    armijo: float = Field(0.01, gt=0, lt=0.5)
    feas_tol: float = Field(config.FEAS_TOL, gt=0)
    opt_tol: float = Field(config.OPT_TOL, gt=0)
    regularization: Tuple[float, float] = (1e-12, 1e-8)
    phase1_margin: float = Field(1e-6, gt=0)
    stall_decrement: float = Field(1e-6, gt=0)  # failed line search above this decrement: not centered
    max_stalls: int = Field(3, ge=1)
    verbosity: int = Field(0, ge=0)


@dataclass(frozen=True, eq=False)
class ConicSolution:
    z: FloatArray
    status: SolverStatus
    objective: float
    complementarity: float
    primal_residual: float
    start_objective: float = math.nan
    outer_iterations: int = 0
    newton_steps: int = 0
    mu_history: Tuple[float, ...] = ()
    seconds: float = 0.0
    message: str = ""


@dataclass(frozen=True, eq=False)
class Phase1Result:
    feasible: bool
    z: Optional[FloatArray]
    infeasibility: float
    newton_steps: int = 0
    moved: bool = True


# ========================================
# Barrier kernels (vectorized over blocks)
# ========================================

def exp_barrier(x: npt.ArrayLike) -> Tuple[FloatArray, FloatArray, FloatArray]:
    """-log(x2 log(x1/x2) - x3) - log x1 - log x2 for rows of x (k x 3); returns value, gradient, Hessian."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    lg = np.log(x1 / x2)
    psi = x2 * lg - x3
    dpsi = np.stack([x2 / x1, lg - 1.0, -np.ones_like(x1)], axis=1)
    value = -np.log(psi) - np.log(x1) - np.log(x2)
    grad = -dpsi / psi[:, None]
    grad[:, 0] -= 1.0 / x1
    grad[:, 1] -= 1.0 / x2
    d2psi = np.zeros((x.shape[0], 3, 3))
    d2psi[:, 0, 0] = -x2 / x1 ** 2
    d2psi[:, 0, 1] = d2psi[:, 1, 0] = 1.0 / x1
    d2psi[:, 1, 1] = -1.0 / x2
    hess = np.einsum("ki,kj->kij", dpsi, dpsi) / (psi ** 2)[:, None, None] - d2psi / psi[:, None, None]
    hess[:, 0, 0] += 1.0 / x1 ** 2
    hess[:, 1, 1] += 1.0 / x2 ** 2
    return value, grad, hess


_D2Q_RSOC = np.array([[0.0, 2.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, -2.0]])


def rsoc_barrier(x: npt.ArrayLike) -> Tuple[FloatArray, FloatArray, FloatArray]:
    """-log(2 x1 x2 - x3^2) for rows of x (k x 3)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    q = 2.0 * x1 * x2 - x3 ** 2
    dq = np.stack([2.0 * x2, 2.0 * x1, -2.0 * x3], axis=1)
    value = -np.log(q)
    grad = -dq / q[:, None]
    hess = np.einsum("ki,kj->kij", dq, dq) / (q ** 2)[:, None, None] - _D2Q_RSOC[None, :, :] / q[:, None, None]
    return value, grad, hess


def ray_barrier(x: npt.ArrayLike) -> Tuple[FloatArray, FloatArray, FloatArray]:
    x = np.asarray(x, dtype=np.float64)
    return -np.log(x), -1.0 / x, 1.0 / x ** 2


def box_barrier(x: npt.ArrayLike, lower: float, upper: float) -> Tuple[FloatArray, FloatArray, FloatArray]:
    """-log(x - l) - log(u - x)."""
    x = np.asarray(x, dtype=np.float64)
    a, b = x - lower, upper - x
    return -np.log(a) - np.log(b), -1.0 / a + 1.0 / b, 1.0 / a ** 2 + 1.0 / b ** 2


def _exp_interior(x: FloatArray) -> FloatArray:
    x1, x2, x3 = x[:, 0], x[:, 1], x[:, 2]
    ok = (x1 > 0) & (x2 > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(ok, x2 * np.log(np.where(ok, x1 / x2, 1.0)) - x3, -1.0)
    return ok & (psi > 0)


def _rsoc_interior(x: FloatArray) -> FloatArray:
    return (x[:, 0] > 0) & (x[:, 1] > 0) & (2.0 * x[:, 0] * x[:, 1] - x[:, 2] ** 2 > 0)


# ========================================
# Standard form
# ========================================

@dataclass(eq=False)
class StandardForm:
    """All constraints as s = h - G z with s in (exp3)^a x (rsoc3)^b x (ray)^c."""

    G: sp.csr_matrix
    h: FloatArray
    exp_idx: np.ndarray
    rsoc_idx: np.ndarray
    ray_idx: np.ndarray
    lower: FloatArray
    upper: FloatArray
    Gt: sp.csr_matrix = field(init=False)
    e: FloatArray = field(init=False)
    nu: float = field(init=False)
    _hess_rows: np.ndarray = field(init=False)
    _hess_cols: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        m = self.G.shape[0]
        self.Gt = self.G.T.tocsr()
        self.e = np.zeros(m)
        if self.exp_idx.size:
            self.e[self.exp_idx] = _E_EXP
        if self.rsoc_idx.size:
            self.e[self.rsoc_idx] = _E_RSOC
        self.e[self.ray_idx] = 1.0
        self.nu = 3.0 * len(self.exp_idx) + 2.0 * len(self.rsoc_idx) + float(len(self.ray_idx))
        blocks = np.concatenate([self.exp_idx, self.rsoc_idx]).reshape(-1, 3)
        rows = np.broadcast_to(blocks[:, :, None], (blocks.shape[0], 3, 3)).ravel()
        cols = np.broadcast_to(blocks[:, None, :], (blocks.shape[0], 3, 3)).ravel()
        self._hess_rows = np.concatenate([rows, self.ray_idx])
        self._hess_cols = np.concatenate([cols, self.ray_idx])

    @property
    def nvars(self) -> int:
        return self.G.shape[1]

    def slack(self, z: FloatArray) -> FloatArray:
        return self.h - self.G @ z

    def interior(self, s: FloatArray) -> bool:
        if self.ray_idx.size and not np.all(s[self.ray_idx] > 0):
            return False
        if self.rsoc_idx.size and not np.all(_rsoc_interior(s[self.rsoc_idx])):
            return False
        if self.exp_idx.size and not np.all(_exp_interior(s[self.exp_idx])):
            return False
        return True

    def value(self, s: FloatArray) -> float:
        if not self.interior(s):
            return math.inf
        total = 0.0
        if self.ray_idx.size:
            total += float(np.sum(-np.log(s[self.ray_idx])))
        if self.rsoc_idx.size:
            total += float(np.sum(rsoc_barrier(s[self.rsoc_idx])[0]))
        if self.exp_idx.size:
            total += float(np.sum(exp_barrier(s[self.exp_idx])[0]))
        return total

    def derivatives(self, s: FloatArray) -> Tuple[float, FloatArray, sp.csr_matrix]:
        """Barrier value, slack gradient and block-diagonal slack Hessian at an interior s."""
        grad = np.zeros_like(s)
        data = []
        total = 0.0
        for idx, kernel in ((self.exp_idx, exp_barrier), (self.rsoc_idx, rsoc_barrier)):
            if idx.size:
                v, g, H = kernel(s[idx])
                total += float(v.sum())
                grad[idx] = g
                data.append(H.ravel())
        v, g, H = ray_barrier(s[self.ray_idx])
        total += float(v.sum())
        grad[self.ray_idx] = g
        data.append(H)
        m = s.shape[0]
        D = sp.csr_matrix((np.concatenate(data), (self._hess_rows, self._hess_cols)), shape=(m, m))
        return total, grad, D

    def violation(self, s: FloatArray) -> float:
        """Largest constraint violation measured on the slack blocks (0 for interior points)."""
        worst = 0.0
        if self.ray_idx.size:
            worst = max(worst, float(np.max(-s[self.ray_idx], initial=0.0)))
        if self.rsoc_idx.size:
            x = s[self.rsoc_idx]
            gap = np.sqrt(np.maximum(x[:, 2] ** 2 - 2.0 * x[:, 0] * x[:, 1], 0.0))
            worst = max(worst, float(np.max(np.maximum(gap, np.maximum(-x[:, 0], -x[:, 1])), initial=0.0)))
        if self.exp_idx.size:
            x = s[self.exp_idx]
            bad = ~_exp_interior(x)
            if bad.any():
                xb = x[bad]
                with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                    need = np.where(xb[:, 1] > 0, xb[:, 1] * np.exp(xb[:, 2] / np.maximum(xb[:, 1], 1e-300)), 0.0)
                excess = np.nan_to_num(need - xb[:, 0], nan=np.inf, posinf=np.inf)
                worst = max(worst, float(np.max(np.maximum(excess, np.maximum(-xb[:, 0], -xb[:, 1])))))
        return worst

    def default_point(self) -> FloatArray:
        z = np.zeros(self.nvars)
        both = np.isfinite(self.lower) & np.isfinite(self.upper)
        z[both] = 0.5 * (self.lower[both] + self.upper[both])
        only_lo = np.isfinite(self.lower) & ~np.isfinite(self.upper)
        z[only_lo] = self.lower[only_lo] + 1.0
        only_hi = ~np.isfinite(self.lower) & np.isfinite(self.upper)
        z[only_hi] = self.upper[only_hi] - 1.0
        return z


def standard_form(program: ConicProgram) -> StandardForm:
    """Cached per feasible set (with_objective copies share the cache)."""
    cached = program.cache.get("standard_form")
    if cached is not None:
        return cached

    G = program.G.tocsr()
    n = program.nvars
    exp_rows: List[Tuple[int, ...]] = []
    rsoc_rows: List[Tuple[int, ...]] = []
    ray_rows: List[int] = []
    extra_G = []
    extra_h: List[float] = []
    next_row = G.shape[0]

    for cone in program.cones:
        if cone.kind is ConeKind.EXP3:
            exp_rows.append(cone.rows)
        elif cone.kind is ConeKind.RSOC3:
            rsoc_rows.append(cone.rows)
        elif cone.kind is ConeKind.NONNEG:
            ray_rows.append(cone.rows[0])
        else:
            r = cone.rows[0]
            if cone.lower == 0.0 and math.isinf(cone.upper):
                ray_rows.append(r)
                continue
            if np.isfinite(cone.lower):
                extra_G.append(G[r])
                extra_h.append(program.h[r] - cone.lower)
                ray_rows.append(next_row)
                next_row += 1
            if np.isfinite(cone.upper):
                extra_G.append(-G[r])
                extra_h.append(cone.upper - program.h[r])
                ray_rows.append(next_row)
                next_row += 1

    eye = sp.identity(n, format="csr")
    lo = np.flatnonzero(np.isfinite(program.lower))
    hi = np.flatnonzero(np.isfinite(program.upper))
    # z - lower >= 0 and upper - z >= 0
    if lo.size:
        extra_G.append(-eye[lo])
        extra_h.extend((-program.lower[lo]).tolist())
        ray_rows.extend(range(next_row, next_row + lo.size))
        next_row += lo.size
    if hi.size:
        extra_G.append(eye[hi])
        extra_h.extend(program.upper[hi].tolist())
        ray_rows.extend(range(next_row, next_row + hi.size))
        next_row += hi.size

    G_std = sp.vstack([G, *extra_G], format="csr") if extra_G else G
    h_std = np.concatenate([program.h, np.asarray(extra_h, dtype=np.float64)])
    sf = StandardForm(
        G=G_std,
        h=h_std,
        exp_idx=np.asarray(exp_rows, dtype=np.int64).reshape(-1, 3),
        rsoc_idx=np.asarray(rsoc_rows, dtype=np.int64).reshape(-1, 3),
        ray_idx=np.asarray(ray_rows, dtype=np.int64),
        lower=program.lower,
        upper=program.upper,
    )
    program.cache["standard_form"] = sf
    return sf


def _augmented(sf: StandardForm, a_floor: float) -> StandardForm:
    """Phase-I form over (z, a): s' = h - G z + a e, plus the ray a + a_floor >= 0."""
    m = sf.G.shape[0]
    G_aug = sp.hstack([sf.G, sp.csr_matrix(-sf.e.reshape(-1, 1))], format="csr")
    floor_row = sp.csr_matrix(([-1.0], ([0], [sf.nvars])), shape=(1, sf.nvars + 1))
    return StandardForm(
        G=sp.vstack([G_aug, floor_row], format="csr"),
        h=np.concatenate([sf.h, [a_floor]]),
        exp_idx=sf.exp_idx,
        rsoc_idx=sf.rsoc_idx,
        ray_idx=np.concatenate([sf.ray_idx, [m]]),
        lower=np.append(sf.lower, -np.inf),
        upper=np.append(sf.upper, np.inf),
    )


# ========================================
# Newton machinery
# ========================================

def _newton_direction(Hz: FloatArray, g: FloatArray, cfg: SolverConfig) -> Optional[FloatArray]:
    """Solve Hz dz = -g by Cholesky on the Jacobi-scaled system, regularizing on failure."""
    d = np.sqrt(np.maximum(np.diag(Hz), 1e-300))
    Hs = Hz / np.outer(d, d)
    rhs = -g / d
    eye = np.eye(Hs.shape[0])
    for reg in (0.0, *cfg.regularization):
        try:
            factor = cho_factor(Hs + reg * eye if reg else Hs, lower=True, check_finite=False)
        except LinAlgError:
            continue
        dz = cho_solve(factor, rhs, check_finite=False) / d
        if np.all(np.isfinite(dz)):
            return dz
    return None


@dataclass
class _PathState:
    z: FloatArray
    status: SolverStatus = SolverStatus.ITER_LIMIT
    mu: float = 1.0
    outer: int = 0
    newton_steps: int = 0
    mu_history: List[float] = field(default_factory=list)
    stopped: bool = False
    stalled: bool = False
    stalls: int = 0
    failure: str = ""


def _center(
    sf: StandardForm,
    c: FloatArray,
    state: _PathState,
    cfg: SolverConfig,
    stop: Optional[Callable[[FloatArray], bool]] = None,
) -> bool:
    """Damped Newton on c.z/mu + F(h - G z) at fixed mu; False on numeric failure.

    A line search that cannot move while the decrement is still above cfg.stall_decrement sets state.stalled.
    """
    z, mu = state.z, state.mu
    state.stalled = False
    s = sf.slack(z)
    for _ in range(cfg.max_newton_per_outer):
        value, grad_s, D = sf.derivatives(s)
        g = c / mu - sf.Gt @ grad_s
        Hz = (sf.Gt @ D @ sf.G).toarray()
        dz = _newton_direction(Hz, g, cfg)
        if dz is None:
            state.z = z
            return False
        decrement = float(-g @ dz)
        if decrement / 2.0 <= cfg.newton_tol:
            break

        ds = -(sf.G @ dz)
        alpha = 1.0
        shrinking = ds[sf.ray_idx] < 0
        if shrinking.any():
            alpha = min(1.0, cfg.fraction_to_boundary * float(np.min(-s[sf.ray_idx][shrinking] / ds[sf.ray_idx][shrinking])))
        lin = float(c @ dz) / mu
        accepted = False
        while alpha > 1e-14:
            s_try = s + alpha * ds
            v_try = sf.value(s_try)
            if np.isfinite(v_try) and alpha * lin + (v_try - value) <= -cfg.armijo * alpha * decrement:
                accepted = True
                break
            alpha *= cfg.line_search_beta
        state.newton_steps += 1
        if not accepted:
            state.stalled = decrement / 2.0 > cfg.stall_decrement
            break
        z = z + alpha * dz
        s = s_try
        if stop is not None and stop(z):
            state.stopped = True
            break
    state.z = z
    return True


def _follow_path(
    sf: StandardForm,
    c: FloatArray,
    z0: FloatArray,
    cfg: SolverConfig,
    stop: Optional[Callable[[FloatArray], bool]] = None,
) -> _PathState:
    state = _PathState(z=z0.copy(), mu=cfg.mu0)
    for outer in range(1, cfg.max_outer + 1):
        state.outer = outer
        state.mu_history.append(state.mu)
        steps_before = state.newton_steps
        if not _center(sf, c, state, cfg, stop):
            state.status = SolverStatus.NUMERIC_FAILURE
            state.failure = "Newton system singular after regularization"
            return state
        objective = float(c @ state.z)
        if cfg.verbosity >= 2:
            logger.debug(
                f"ipm outer {outer:3d} | mu={state.mu:.3e} | newton={state.newton_steps - steps_before:3d} "
                f"| obj={objective:.12e}"
            )
        if state.stopped:
            state.status = SolverStatus.OPTIMAL
            return state
        if state.stalled:
            state.stalls += 1
            logger.debug(f"ipm outer {outer}: centering stalled at mu={state.mu:.3e} ({state.stalls} in a row)")
            if state.stalls > cfg.max_stalls:
                state.status = SolverStatus.NUMERIC_FAILURE
                state.failure = f"centering stalled {state.stalls} times in a row at mu={state.mu:.3e}"
                return state
            # not centered: no duality bound to test, shrink mu gently
            state.mu *= math.sqrt(cfg.theta)
            continue
        state.stalls = 0
        if sf.nu * state.mu <= cfg.opt_tol * max(1.0, abs(objective)):
            state.status = SolverStatus.OPTIMAL
            return state
        state.mu *= cfg.theta
    state.status = SolverStatus.ITER_LIMIT
    return state


# ========================================
# Public entry points
# ========================================

def _checked_standard_form(program: ConicProgram) -> StandardForm:
    diagnostics = validate(program)
    if diagnostics:
        raise InvalidProgramError(diagnostics)
    return standard_form(program)


def _phase1(sf: StandardForm, cfg: SolverConfig, candidate: Optional[npt.ArrayLike]) -> Phase1Result:
    z0 = sf.default_point() if candidate is None else np.array(candidate, dtype=np.float64)
    scale = float(np.max(np.abs(sf.h), initial=0.0))
    margin = cfg.phase1_margin * max(1.0, scale)
    s0 = sf.slack(z0)
    if sf.interior(s0 - margin * sf.e):
        return Phase1Result(feasible=True, z=z0, infeasibility=-margin, moved=False)

    a = 1.0
    while not sf.interior(s0 + a * sf.e):
        a *= 2.0
        if a > 1e15:
            return Phase1Result(feasible=False, z=None, infeasibility=math.inf)
    a_floor = max(1.0, 10.0 * margin)
    aug = _augmented(sf, a_floor)
    c_aug = np.zeros(sf.nvars + 1)
    c_aug[-1] = 1.0
    state = _follow_path(aug, c_aug, np.append(z0, 2.0 * a), cfg, stop=lambda z: z[-1] < -margin)
    z, a_final = state.z[:-1], float(state.z[-1])
    if state.stopped and sf.interior(sf.slack(z)):
        return Phase1Result(feasible=True, z=z, infeasibility=a_final, newton_steps=state.newton_steps)
    logger.debug(f"phase-I ended with auxiliary value {a_final:.3e} (status {state.status.value})")
    return Phase1Result(feasible=False, z=z, infeasibility=max(a_final, 0.0), newton_steps=state.newton_steps)


def phase1(
    program: ConicProgram,
    config: Optional[SolverConfig] = None,
    candidate: Optional[npt.ArrayLike] = None,
) -> Phase1Result:
    """Strictly interior point of the feasible set, or an infeasibility report.

    A candidate that is already interior with the required margin is returned as is.
    """
    cfg = config or SolverConfig()
    return _phase1(_checked_standard_form(program), cfg, candidate)


def solve(
    program: ConicProgram,
    config: Optional[SolverConfig] = None,
    warm_start: Optional[npt.ArrayLike] = None,
) -> ConicSolution:
    """Minimize program.c over the feasible set.

    Args:
        program: validated conic program
        config: solver tolerances (defaults to SolverConfig())
        warm_start: strictly interior primal point; phase-I runs from it otherwise

    Returns:
        ConicSolution with status OPTIMAL, INFEASIBLE, ITER_LIMIT or NUMERIC_FAILURE
    """
    cfg = config or SolverConfig()
    started = time.perf_counter()
    sf = _checked_standard_form(program)
    c = program.c

    z0 = None
    phase1_steps = 0
    if warm_start is not None:
        candidate = np.array(warm_start, dtype=np.float64)
        if candidate.shape == (program.nvars,) and sf.interior(sf.slack(candidate)):
            z0 = candidate
    if z0 is None:
        report = _phase1(sf, cfg, warm_start if warm_start is not None and np.shape(warm_start) == (program.nvars,) else None)
        phase1_steps = report.newton_steps
        if not report.feasible:
            z_fail = report.z if report.z is not None else sf.default_point()
            return ConicSolution(
                z=z_fail,
                status=SolverStatus.INFEASIBLE,
                objective=float(c @ z_fail),
                complementarity=math.inf,
                primal_residual=sf.violation(sf.slack(z_fail)),
                newton_steps=phase1_steps,
                seconds=time.perf_counter() - started,
                message=f"phase-I infeasibility {report.infeasibility:.3e}",
            )
        z0 = report.z

    state = _follow_path(sf, c, z0, cfg)
    status = state.status
    s = sf.slack(state.z)
    message = ""
    if status is SolverStatus.OPTIMAL and not sf.interior(s):
        status, message = SolverStatus.NUMERIC_FAILURE, "final point left the cone interiors"
    elif status is SolverStatus.NUMERIC_FAILURE:
        message = state.failure

    if cfg.verbosity >= 1:
        logger.debug(f"ipm {status.value}: obj={float(c @ state.z):.12e}, outer={state.outer}, newton={state.newton_steps}")
    return ConicSolution(
        z=state.z,
        status=status,
        objective=float(c @ state.z),
        complementarity=sf.nu * state.mu,
        primal_residual=sf.violation(s),
        start_objective=float(c @ z0),
        outer_iterations=state.outer,
        newton_steps=state.newton_steps + phase1_steps,
        mu_history=tuple(state.mu_history),
        seconds=time.perf_counter() - started,
        message=message,
    )
