"""
Accelerated HALS Refinement
Exact block-coordinate descent on ||V - WH||_F: each row of H (and each column of W) is replaced
by its closed-form nonnegative least-squares update with everything else fixed. The inner loop on
one factor is repeated while it still pays off, either a fixed number of times or in proportion to
the cost of forming the Gram products.
"""

import time
from enum import Enum
from typing import Callable, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

import conic_nmf.config as config
from conic_nmf.exceptions import InvalidInputError
from conic_nmf.instances import FactorPair, NonnegMatrix, as_array
from conic_nmf.logger import logger

FloatArray = npt.NDArray[np.float64]


class InnerRule(str, Enum):
    FIXED = "fixed"
    TIME = "time"


class HalsConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    max_outer_sweeps: int = Field(500, ge=1)
    inner_rule: InnerRule = InnerRule.FIXED
    inner_repeats: int = Field(2, ge=1)
    alpha: float = Field(0.5, gt=0)          # time rule: repeats <= 1 + alpha * rho
    delta: float = Field(0.01, ge=0, le=1)   # time rule: stop once an inner pass moves < delta * first pass
    max_inner_repeats: int = Field(20, ge=1)
    zero_clip: float = Field(1e-16, ge=0)
    target_error: float = Field(config.SUCCESS_TOL, gt=0)
    min_improvement: float = Field(1e-12, ge=0)


def _revive_partner(partner: FloatArray, gram: FloatArray, cross: FloatArray, target: FloatArray, k: int) -> None:
    """Set partner[:, k] to a small positive vector and refresh gram row/column k and cross[k] to match."""
    partner[:, k] = max(float(partner.max(initial=0.0)), 1.0) * 1e-8
    column = partner[:, k]
    products = partner.T @ column
    gram[k, :] = products
    gram[:, k] = products
    cross[k] = column @ target


def block_update(
    X: FloatArray,
    gram: FloatArray,
    cross: FloatArray,
    k: int,
    zero_clip: float = 1e-16,
    partner: Optional[FloatArray] = None,
    target: Optional[FloatArray] = None,
) -> float:
    """X[k] <- max(0, X[k] + (cross[k] - gram[k] @ X) / gram[k, k]) in place; returns ||change||^2.

    With X = H, gram = W^T W and cross = W^T V this is the exact minimizer over row k of H.
    A zero denominator means partner column k is dead: with `partner` (W, or H^T for the W pass) and
    `target` (V, or V^T) given, that column is reinitialized and the update goes ahead; without them
    the block is skipped.
    """
    denom = gram[k, k]
    if denom <= 0:
        if partner is None or target is None:
            return 0.0
        _revive_partner(partner, gram, cross, target, k)
        logger.debug(f"HALS: reinitialized dead block {k}")
        denom = gram[k, k]
    updated = X[k] + (cross[k] - gram[k] @ X) / denom
    updated[updated < zero_clip] = 0.0
    change = updated - X[k]
    X[k] = updated
    return float(change @ change)


def _revive_zero_columns(W: FloatArray, H: FloatArray) -> int:
    """Give a small positive vector to every zero column of W / zero row of H so denominators are nonzero."""
    revived = 0
    scale_W = max(float(W.max(initial=0.0)), 1.0) * 1e-8
    scale_H = max(float(H.max(initial=0.0)), 1.0) * 1e-8
    for k in range(W.shape[1]):
        if not W[:, k].any():
            W[:, k] = scale_W
            revived += 1
        if not H[k].any():
            H[k] = scale_H
            revived += 1
    return revived


def _factor_pass(
    X: FloatArray,
    gram: FloatArray,
    cross: FloatArray,
    partner: FloatArray,
    target: FloatArray,
    cfg: HalsConfig,
    setup_seconds: float,
    on_update: Optional[Callable[[], None]],
) -> int:
    """Inner loop on one factor; returns the number of passes made."""
    if cfg.inner_rule is InnerRule.FIXED:
        for _ in range(cfg.inner_repeats):
            for k in range(X.shape[0]):
                block_update(X, gram, cross, k, cfg.zero_clip, partner, target)
                if on_update is not None:
                    on_update()
        return cfg.inner_repeats

    # time rule: repeat while the pass is cheap relative to forming gram/cross
    rho = np.inf
    first = 0.0
    moved = 1.0
    passes = 0
    started = time.perf_counter()
    while passes < cfg.max_inner_repeats and passes <= cfg.alpha * rho and moved >= cfg.delta * first:
        moved = 0.0
        for k in range(X.shape[0]):
            moved += block_update(X, gram, cross, k, cfg.zero_clip, partner, target)
            if on_update is not None:
                on_update()
        passes += 1
        if passes == 1:
            first = moved
            rho = setup_seconds / max(time.perf_counter() - started, 1e-7)
    return passes


def refine_with_trace(
    V: Union[NonnegMatrix, npt.ArrayLike],
    W: npt.ArrayLike,
    H: npt.ArrayLike,
    config: Optional[HalsConfig] = None,
    record_updates: bool = True,
) -> Tuple[FactorPair, List[float]]:
    """refine() that also returns the relative error after every block update (first entry: start)."""
    cfg = config or HalsConfig()
    Vm = as_array(V)
    W = np.array(W, dtype=np.float64)
    H = np.array(H, dtype=np.float64)
    if W.shape[0] != Vm.shape[0] or H.shape[1] != Vm.shape[1] or W.shape[1] != H.shape[0]:
        raise InvalidInputError(f"factor shapes {W.shape}, {H.shape} do not match V {Vm.shape}")
    if (W < 0).any() or (H < 0).any():
        raise InvalidInputError("HALS refinement needs nonnegative factors")
    norm_V = float(np.linalg.norm(Vm))
    if norm_V == 0.0:
        raise InvalidInputError("HALS refinement needs a nonzero matrix")

    revived = _revive_zero_columns(W, H)
    if revived:
        logger.debug(f"HALS: revived {revived} zero columns/rows before refinement")

    def error() -> float:
        return float(np.linalg.norm(Vm - W @ H)) / norm_V

    history = [error()]
    on_update = (lambda: history.append(error())) if record_updates else None
    Wt = W.T  # view: row updates of Wt are column updates of W
    current = history[0]
    if current <= cfg.target_error:
        return FactorPair(W=W, H=H), history
    for sweep in range(1, cfg.max_outer_sweeps + 1):
        tic = time.perf_counter()
        gram_W, cross_W = W.T @ W, W.T @ Vm
        _factor_pass(H, gram_W, cross_W, W, Vm, cfg, time.perf_counter() - tic, on_update)

        tic = time.perf_counter()
        gram_H, cross_H = H @ H.T, H @ Vm.T
        _factor_pass(Wt, gram_H, cross_H, H.T, Vm.T, cfg, time.perf_counter() - tic, on_update)

        previous, current = current, error()
        if current <= cfg.target_error or previous - current < cfg.min_improvement:
            break
    logger.debug(f"HALS: {sweep} sweeps, relative error {history[0]:.3e} -> {current:.3e}")
    return FactorPair(W=W, H=H), history


def refine(
    V: Union[NonnegMatrix, npt.ArrayLike],
    W: npt.ArrayLike,
    H: npt.ArrayLike,
    config: Optional[HalsConfig] = None,
) -> FactorPair:
    """Polish (W, H) towards V; ||V - WH||_F never increases across a block update."""
    factors, _ = refine_with_trace(V, W, H, config, record_updates=False)
    return factors
