"""
Conic Formulations of Exact NMF
Feasible sets, concave objectives, changes of variables and sparsity pattern integration for

    ExpUnder ("exp"): W = e^U, H = e^T, (t_fkn, 1, U_fk + T_kn) in K_exp, sum_k t_fkn <= V_fn
    SocOver  ("soc"): W = sqrt(U), H = sqrt(T), (U_fk, T_kn / 2, t_fkn) in Q_r, sum_k t_fkn >= V_fn

Both objectives are written in the minimization convention:
    exp: phi = -log sum e^(U + T)        soc: phi = sum sqrt(U) sqrt(T)
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import FrozenSet, Iterable, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp
from scipy.special import logsumexp

import conic_nmf.config as config
from conic_nmf.conic_program import Cone, ConicProgram
from conic_nmf.exceptions import InvalidInputError, SingularityError, UnsupportedInputError
from conic_nmf.instances import FactorPair, NonnegMatrix, as_array

FloatArray = npt.NDArray[np.float64]
MatrixLike = Union[NonnegMatrix, npt.ArrayLike]


class Formulation(str, Enum):
    EXP_UNDER = "exp"
    SOC_OVER = "soc"


class SpiMode(str, Enum):
    FACTOR = "factor"   # compare W, H entries with th
    LATENT = "latent"   # compare raw U, T entries


# ========================================
# Sparsity patterns
# ========================================

@dataclass(frozen=True)
class SparsityPattern:
    F: int
    K: int
    N: int
    zeroed_U: FrozenSet[Tuple[int, int]] = frozenset()
    zeroed_T: FrozenSet[Tuple[int, int]] = frozenset()

    @classmethod
    def empty(cls, F: int, K: int, N: int) -> "SparsityPattern":
        return cls(F, K, N)

    def grow(
        self,
        zeroed_U: Iterable[Tuple[int, int]] = (),
        zeroed_T: Iterable[Tuple[int, int]] = (),
    ) -> "SparsityPattern":
        """Patterns only grow."""
        return SparsityPattern(
            self.F, self.K, self.N,
            self.zeroed_U | frozenset(zeroed_U),
            self.zeroed_T | frozenset(zeroed_T),
        )

    @cached_property
    def u_alive(self) -> np.ndarray:
        mask = np.ones((self.F, self.K), dtype=bool)
        for f, k in self.zeroed_U:
            mask[f, k] = False
        return mask

    @cached_property
    def T_alive(self) -> np.ndarray:
        mask = np.ones((self.K, self.N), dtype=bool)
        for k, n in self.zeroed_T:
            mask[k, n] = False
        return mask

    @cached_property
    def t_alive(self) -> np.ndarray:
        return self.u_alive[:, :, None] & self.T_alive[None, :, :]

    @property
    def dropped_t(self) -> FrozenSet[Tuple[int, int, int]]:
        return frozenset(tuple(int(i) for i in idx) for idx in np.argwhere(~self.t_alive))

    def collapsed_components(self) -> List[int]:
        """Components k whose column of W or row of H is entirely zeroed."""
        dead_col = ~self.u_alive.any(axis=0)
        dead_row = ~self.T_alive.any(axis=1)
        return [int(k) for k in np.flatnonzero(dead_col | dead_row)]

    def __len__(self) -> int:
        return len(self.zeroed_U) + len(self.zeroed_T)


@dataclass(frozen=True, eq=False)
class VariableLayout:
    """Positions of the surviving U, T, t entries in the solver vector (-1 where dropped)."""

    idx_U: np.ndarray
    idx_T: np.ndarray
    idx_t: np.ndarray
    nvars: int

    @classmethod
    def build(cls, pattern: SparsityPattern) -> "VariableLayout":
        idx_U = np.full((pattern.F, pattern.K), -1, dtype=np.int64)
        idx_T = np.full((pattern.K, pattern.N), -1, dtype=np.int64)
        idx_t = np.full((pattern.F, pattern.K, pattern.N), -1, dtype=np.int64)
        offset = 0
        for idx, alive in ((idx_U, pattern.u_alive), (idx_T, pattern.T_alive), (idx_t, pattern.t_alive)):
            count = int(alive.sum())
            idx[alive] = np.arange(offset, offset + count)
            offset += count
        return cls(idx_U=idx_U, idx_T=idx_T, idx_t=idx_t, nvars=offset)


@dataclass(frozen=True, eq=False)
class LatentPoint:
    """(U, T, t) for one formulation; entries in the pattern are stored as exact zeros."""

    U: FloatArray
    T: FloatArray
    t: FloatArray
    tag: Formulation
    pattern: SparsityPattern

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.t.shape


@dataclass(frozen=True, eq=False)
class Gradient:
    dU: FloatArray
    dT: FloatArray

    def inner(self, Z: LatentPoint) -> float:
        return float(np.sum(self.dU * Z.U) + np.sum(self.dT * Z.T))


@dataclass(frozen=True, eq=False)
class SpiResult:
    point: LatentPoint
    pattern: SparsityPattern
    added_U: Tuple[Tuple[int, int], ...]
    added_T: Tuple[Tuple[int, int], ...]
    phi_before: float
    phi_after: float
    warnings: Tuple[str, ...] = field(default_factory=tuple)

    @property
    def changed(self) -> bool:
        return bool(self.added_U or self.added_T)


# ========================================
# Bounds and shifts
# ========================================

def latent_bounds(tag: Formulation, factor_bound: float = config.FACTOR_BOUND) -> Tuple[float, float]:
    """Box on every U, T entry: [-2 log B, 2 log B] (exp) or [0, B^2] (soc)."""
    if not factor_bound > 1:
        raise InvalidInputError(f"factor bound must exceed 1, got {factor_bound}")
    if Formulation(tag) is Formulation.EXP_UNDER:
        span = 2.0 * math.log(factor_bound)
        return -span, span
    return 0.0, factor_bound ** 2


def exp_shift(V: MatrixLike, relative: float = config.EXP_ZERO_SHIFT) -> FloatArray:
    """V + eps with eps = relative * max V, making every entry positive."""
    Vm = as_array(V)
    if relative <= 0:
        raise InvalidInputError(f"zero shift must be positive, got {relative}")
    return Vm + relative * float(Vm.max())


def phi_lower_bound(V: MatrixLike, tag: Formulation) -> float:
    """Certified lower bound of phi on the feasible set (from WH >= V, resp. WH <= V)."""
    total = float(as_array(V).sum())
    if Formulation(tag) is Formulation.SOC_OVER:
        return total
    if total <= 0:
        raise InvalidInputError("the exp formulation needs a matrix with positive mass")
    return -math.log(total)


# ========================================
# Programs
# ========================================

def _check_rank(V: FloatArray, K: int) -> None:
    if K < 1:
        raise InvalidInputError(f"rank K must be positive, got {K}")
    if V.ndim != 2:
        raise InvalidInputError(f"V must be a matrix, got shape {V.shape}")


def build_feasible_set(
    V: MatrixLike,
    K: int,
    tag: Formulation,
    pattern: Optional[SparsityPattern] = None,
    factor_bound: float = config.FACTOR_BOUND,
    check_zeros: bool = True,
) -> ConicProgram:
    """Zero-objective program whose feasible set is the exp or soc latent set."""
    Vm = as_array(V)
    _check_rank(Vm, K)
    tag = Formulation(tag)
    F, N = Vm.shape
    pattern = SparsityPattern.empty(F, K, N) if pattern is None else pattern
    if (pattern.F, pattern.K, pattern.N) != (F, K, N):
        raise InvalidInputError(f"pattern is for {pattern.F}x{pattern.K}x{pattern.N}, problem is {F}x{K}x{N}")
    layout = VariableLayout.build(pattern)
    alive = pattern.t_alive

    f_idx, k_idx, n_idx = np.nonzero(alive)
    n_cones = f_idx.size
    t_cols = layout.idx_t[f_idx, k_idx, n_idx]
    u_cols = layout.idx_U[f_idx, k_idx]
    T_cols = layout.idx_T[k_idx, n_idx]
    base = 3 * np.arange(n_cones)

    rows: List[np.ndarray] = []
    cols: List[np.ndarray] = []
    vals: List[np.ndarray] = []
    h = np.zeros(3 * n_cones)
    if tag is Formulation.EXP_UNDER:
        # (x1, x2, x3) = (t, 1, U + T)
        rows += [base, base + 2, base + 2]
        cols += [t_cols, u_cols, T_cols]
        vals += [np.full(n_cones, -1.0)] * 3
        h[base + 1] = 1.0
    else:
        # (x1, x2, x3) = (U, T / 2, t)
        rows += [base, base + 1, base + 2]
        cols += [u_cols, T_cols, t_cols]
        vals += [np.full(n_cones, -1.0), np.full(n_cones, -0.5), np.full(n_cones, -1.0)]

    has_t = alive.any(axis=1)
    if tag is Formulation.EXP_UNDER:
        keep = has_t
        if check_zeros and np.any(keep & (Vm <= 0)):
            f, n = (int(i) for i in np.argwhere(keep & (Vm <= 0))[0])
            raise UnsupportedInputError(
                f"exp formulation cannot represent V[{f}, {n}] = 0; configure a zero shift (exp_shift)"
            )
    else:
        keep = has_t | (Vm > 0)
    kept_f, kept_n = np.nonzero(keep)
    row_of = np.full((F, N), -1, dtype=np.int64)
    row_of[kept_f, kept_n] = 3 * n_cones + np.arange(kept_f.size)
    sign = 1.0 if tag is Formulation.EXP_UNDER else -1.0
    rows.append(row_of[f_idx, n_idx])
    cols.append(t_cols)
    vals.append(np.full(n_cones, sign))
    h = np.concatenate([h, sign * Vm[kept_f, kept_n]])

    nrows = h.size
    G = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nrows, layout.nvars),
    )
    cone_ctor = Cone.exp3 if tag is Formulation.EXP_UNDER else Cone.rsoc3
    cones = [cone_ctor((3 * j, 3 * j + 1, 3 * j + 2)) for j in range(n_cones)]
    cones += [Cone.ray(int(r)) for r in row_of[kept_f, kept_n]]

    lo, hi = latent_bounds(tag, factor_bound)
    lower = np.full(layout.nvars, -np.inf)
    upper = np.full(layout.nvars, np.inf)
    n_latent = int(pattern.u_alive.sum() + pattern.T_alive.sum())
    lower[:n_latent] = lo
    upper[:n_latent] = hi
    if tag is Formulation.EXP_UNDER:
        upper[n_latent:] = float(Vm.max()) + 1.0

    return ConicProgram(
        nvars=layout.nvars,
        c=np.zeros(layout.nvars),
        G=G,
        h=h,
        cones=tuple(cones),
        lower=lower,
        upper=upper,
        name=f"{tag.value}_F{F}_K{K}_N{N}_p{len(pattern)}",
    )


def objective_vector(grad: Gradient, layout: VariableLayout) -> FloatArray:
    """Gradient on the surviving U, T coordinates, zero on t."""
    c = np.zeros(layout.nvars)
    live_U = layout.idx_U >= 0
    live_T = layout.idx_T >= 0
    c[layout.idx_U[live_U]] = grad.dU[live_U]
    c[layout.idx_T[live_T]] = grad.dT[live_T]
    return c


def build_program(
    V: MatrixLike,
    K: int,
    tag: Formulation,
    pattern: Optional[SparsityPattern],
    gradient: Gradient,
    factor_bound: float = config.FACTOR_BOUND,
    check_zeros: bool = True,
) -> ConicProgram:
    """LMO program: minimize <gradient, (U, T)> over the latent feasible set."""
    Vm = as_array(V)
    base = build_feasible_set(Vm, K, tag, pattern, factor_bound, check_zeros)
    pattern = SparsityPattern.empty(Vm.shape[0], K, Vm.shape[1]) if pattern is None else pattern
    return base.with_objective(objective_vector(gradient, VariableLayout.build(pattern)))


# ========================================
# Objective
# ========================================

def phi(Z: LatentPoint) -> float:
    p = Z.pattern
    if Z.tag is Formulation.EXP_UNDER:
        A = Z.U[:, :, None] + Z.T[None, :, :]
        return -float(logsumexp(A[p.t_alive]))
    sU = np.sqrt(np.maximum(Z.U, 0.0)) * p.u_alive
    sT = np.sqrt(np.maximum(Z.T, 0.0)) * p.T_alive
    return float(np.sum(sU.sum(axis=0) * sT.sum(axis=1)))


def grad_phi(Z: LatentPoint) -> Gradient:
    """Gradient over (U, T); pattern entries carry a zero coefficient."""
    p = Z.pattern
    if Z.tag is Formulation.EXP_UNDER:
        A = Z.U[:, :, None] + Z.T[None, :, :]
        alive = p.t_alive
        lse = logsumexp(A[alive])
        weights = np.where(alive, np.exp(np.where(alive, A, 0.0) - lse), 0.0)
        return Gradient(dU=-weights.sum(axis=2) * p.u_alive, dT=-weights.sum(axis=0) * p.T_alive)

    sU = np.sqrt(np.maximum(Z.U, 0.0)) * p.u_alive
    sT = np.sqrt(np.maximum(Z.T, 0.0)) * p.T_alive
    num_U = np.broadcast_to(sT.sum(axis=1)[None, :], sU.shape)
    num_T = np.broadcast_to(sU.sum(axis=0)[:, None], sT.shape)
    for name, s, num, alive in (("U", sU, num_U, p.u_alive), ("T", sT, num_T, p.T_alive)):
        singular = alive & (s == 0.0) & (num > 0.0)
        if singular.any():
            i, j = (int(v) for v in np.argwhere(singular)[0])
            raise SingularityError(
                f"soc gradient is singular at {name}[{i}, {j}] = 0 outside the sparsity pattern; "
                "trigger sparsity pattern integration"
            )
    dU = np.divide(num_U, 2.0 * sU, out=np.zeros_like(sU), where=p.u_alive & (sU > 0.0))
    dT = np.divide(num_T, 2.0 * sT, out=np.zeros_like(sT), where=p.T_alive & (sT > 0.0))
    return Gradient(dU=dU, dT=dT)


# ========================================
# Changes of variables
# ========================================

def to_factors(Z: LatentPoint) -> FactorPair:
    p = Z.pattern
    if Z.tag is Formulation.EXP_UNDER:
        W = np.where(p.u_alive, np.exp(Z.U), 0.0)
        H = np.where(p.T_alive, np.exp(Z.T), 0.0)
    else:
        W = np.where(p.u_alive, np.sqrt(np.maximum(Z.U, 0.0)), 0.0)
        H = np.where(p.T_alive, np.sqrt(np.maximum(Z.T, 0.0)), 0.0)
    return FactorPair(W=W, H=H)


def _masked_product(W: FloatArray, H: FloatArray, pattern: SparsityPattern) -> FloatArray:
    return (W * pattern.u_alive) @ (H * pattern.T_alive)


def from_factors(
    W: npt.ArrayLike,
    H: npt.ArrayLike,
    tag: Formulation,
    V: Optional[MatrixLike] = None,
    pattern: Optional[SparsityPattern] = None,
    delta: float = config.INTERIOR_DELTA,
    factor_bound: float = config.FACTOR_BOUND,
) -> LatentPoint:
    """Latent point for (W, H), strictly interior to the feasible set of V when V is given.

    t starts at the tight values and is moved off the cone boundary by the factor 1 + delta.
    W and H are rescaled uniformly when WH does not clear V by (1 + delta)^2: upward for the
    soc form (WH >= V), downward for the exp form (WH <= V).
    """
    tag = Formulation(tag)
    W = np.array(W, dtype=np.float64)
    H = np.array(H, dtype=np.float64)
    if W.ndim != 2 or H.ndim != 2 or W.shape[1] != H.shape[0]:
        raise InvalidInputError(f"incompatible factor shapes {W.shape} and {H.shape}")
    F, K = W.shape
    N = H.shape[1]
    pattern = SparsityPattern.empty(F, K, N) if pattern is None else pattern
    for name, M, alive in (("W", W, pattern.u_alive), ("H", H, pattern.T_alive)):
        bad = alive & ~(M > 0)
        if bad.any():
            i, j = (int(v) for v in np.argwhere(bad)[0])
            raise InvalidInputError(f"{name}[{i}, {j}] = {M[i, j]!r} must be strictly positive outside the pattern")
    if delta <= 0:
        raise InvalidInputError(f"interiority margin must be positive, got {delta}")

    lo, hi = latent_bounds(tag, factor_bound)
    if V is not None:
        Vm = as_array(V)
        if Vm.shape != (F, N):
            raise InvalidInputError(f"V has shape {Vm.shape}, factors give {(F, N)}")
        WH = _masked_product(W, H, pattern)
        rows = pattern.t_alive.any(axis=1)
        if tag is Formulation.SOC_OVER:
            uncovered = (Vm > 0) & ~(WH > 0)
            if uncovered.any():
                f, n = (int(v) for v in np.argwhere(uncovered)[0])
                raise InvalidInputError(f"WH[{f}, {n}] = 0 cannot cover V[{f}, {n}] > 0 in the soc form")
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(Vm > 0, Vm / WH, 0.0)
            gamma = max(1.0, (1.0 + delta) ** 2 * float(ratio.max()))
        else:
            blocked = rows & ~(Vm > 0)
            if blocked.any():
                f, n = (int(v) for v in np.argwhere(blocked)[0])
                raise UnsupportedInputError(f"V[{f}, {n}] = 0 leaves no room under the exp form")
            ratio = np.where(rows, WH / np.where(Vm > 0, Vm, 1.0), 0.0)
            worst = float(ratio.max())
            gamma = min(1.0, 1.0 / ((1.0 + delta) ** 2 * worst)) if worst > 0 else 1.0
        W = W * math.sqrt(gamma)
        H = H * math.sqrt(gamma)

    alive_U, alive_T = pattern.u_alive, pattern.T_alive
    if tag is Formulation.EXP_UNDER:
        with np.errstate(divide="ignore"):
            U = np.where(alive_U, np.log(np.where(alive_U, W, 1.0)), 0.0)
            T = np.where(alive_T, np.log(np.where(alive_T, H, 1.0)), 0.0)
        t = (1.0 + delta) * np.exp(U[:, :, None] + T[None, :, :])
    else:
        U = np.where(alive_U, W ** 2, 0.0)
        T = np.where(alive_T, H ** 2, 0.0)
        t = (W[:, :, None] * H[None, :, :]) / (1.0 + delta)
    t = np.where(pattern.t_alive, t, 0.0)

    live = np.concatenate([U[alive_U], T[alive_T]])
    if live.size and (live.min() < lo or live.max() > hi):
        raise InvalidInputError(
            f"factors leave the latent box [{lo:.4g}, {hi:.4g}]; raise the factor bound (now {factor_bound:g})"
        )
    return LatentPoint(U=U, T=T, t=t, tag=tag, pattern=pattern)


def to_vector(Z: LatentPoint, layout: Optional[VariableLayout] = None) -> FloatArray:
    layout = layout or VariableLayout.build(Z.pattern)
    z = np.empty(layout.nvars)
    for idx, values in ((layout.idx_U, Z.U), (layout.idx_T, Z.T), (layout.idx_t, Z.t)):
        live = idx >= 0
        z[idx[live]] = values[live]
    return z


def from_vector(z: npt.ArrayLike, tag: Formulation, pattern: SparsityPattern,
                layout: Optional[VariableLayout] = None) -> LatentPoint:
    layout = layout or VariableLayout.build(pattern)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (layout.nvars,):
        raise InvalidInputError(f"solver vector has shape {z.shape}, layout expects ({layout.nvars},)")
    parts = []
    for idx in (layout.idx_U, layout.idx_T, layout.idx_t):
        out = np.zeros(idx.shape)
        live = idx >= 0
        out[live] = z[idx[live]]
        parts.append(out)
    return LatentPoint(U=parts[0], T=parts[1], t=parts[2], tag=Formulation(tag), pattern=pattern)


def combine(Z: LatentPoint, Y: LatentPoint, tau: float) -> LatentPoint:
    """(1 - tau) Z + tau Y."""
    if Z.tag is not Y.tag or Z.pattern != Y.pattern:
        raise InvalidInputError("cannot combine points of different formulations or patterns")
    return LatentPoint(
        U=(1.0 - tau) * Z.U + tau * Y.U,
        T=(1.0 - tau) * Z.T + tau * Y.T,
        t=(1.0 - tau) * Z.t + tau * Y.t,
        tag=Z.tag,
        pattern=Z.pattern,
    )


def feasibility_violation(Z: LatentPoint, V: MatrixLike) -> float:
    """Largest violation over the cone and linear constraints (0 for feasible points)."""
    Vm = as_array(V)
    alive = Z.pattern.t_alive
    row_sum = np.sum(Z.t * alive, axis=1)
    if Z.tag is Formulation.EXP_UNDER:
        cone = np.where(alive, np.exp(Z.U[:, :, None] + Z.T[None, :, :]) - Z.t, 0.0)
        rows = row_sum - Vm
        sign = 0.0
    else:
        UT = np.maximum(Z.U, 0.0)[:, :, None] * np.maximum(Z.T, 0.0)[None, :, :]
        cone = np.where(alive, np.abs(Z.t) - np.sqrt(UT), 0.0)
        rows = Vm - row_sum
        sign = max(0.0, -float(np.min(Z.U[Z.pattern.u_alive], initial=0.0)),
                   -float(np.min(Z.T[Z.pattern.T_alive], initial=0.0)))
    return max(0.0, float(cone.max(initial=0.0)), float(rows.max(initial=0.0)), sign)


# ========================================
# Sparsity pattern integration
# ========================================

def spi_apply(
    Z: LatentPoint,
    threshold: float = config.SPI_THRESHOLD,
    mode: SpiMode = SpiMode.FACTOR,
) -> SpiResult:
    """Zero the U, T entries below threshold and drop their t slices.

    The factor mode compares W = G(U) and H = G(T) with the threshold; the latent mode compares
    the raw soc entries U, T (for the exp form both modes coincide since G is monotone).
    """
    if not threshold > 0:
        raise InvalidInputError(f"SPI threshold must be positive, got {threshold}")
    mode = SpiMode(mode)
    p = Z.pattern
    if Z.tag is Formulation.EXP_UNDER:
        cut = math.log(threshold)
        small_U, small_T = Z.U < cut, Z.T < cut
    elif mode is SpiMode.FACTOR:
        small_U = np.sqrt(np.maximum(Z.U, 0.0)) < threshold
        small_T = np.sqrt(np.maximum(Z.T, 0.0)) < threshold
    else:
        small_U, small_T = Z.U < threshold, Z.T < threshold
    added_U = tuple((int(f), int(k)) for f, k in np.argwhere(small_U & p.u_alive))
    added_T = tuple((int(k), int(n)) for k, n in np.argwhere(small_T & p.T_alive))

    phi_before = phi(Z)
    if not added_U and not added_T:
        return SpiResult(Z, p, (), (), phi_before, phi_before)

    grown = p.grow(added_U, added_T)
    reduced = LatentPoint(
        U=np.where(grown.u_alive, Z.U, 0.0),
        T=np.where(grown.T_alive, Z.T, 0.0),
        t=np.where(grown.t_alive, Z.t, 0.0),
        tag=Z.tag,
        pattern=grown,
    )
    newly = sorted(set(grown.collapsed_components()) - set(p.collapsed_components()))
    warnings = tuple(f"rank collapse: component {k} lost its whole column of W or row of H" for k in newly)
    return SpiResult(reduced, grown, added_U, added_T, phi_before, phi(reduced), warnings)
