"""
Instance Library
Input-matrix data model, the builtin catalog (rigid 5x5 instances, nested-hexagon
slack matrices), seeded random products, CSV plumbing and the relative-error metric.
"""

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel

import conic_nmf.config as config
from conic_nmf.exceptions import (
    ContractViolation,
    InvalidInputError,
    MatrixParseError,
    MatrixValidationError,
    UnknownInstanceError,
)

FloatArray = npt.NDArray[np.float64]
PathLike = Union[str, Path]


def _check_entries(values: npt.ArrayLike, what: str) -> FloatArray:
    """Coerce to a read-only float matrix; reject non-finite and negative entries with their location."""
    try:
        arr = np.array(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise MatrixParseError(f"{what}: entries are not a real matrix ({exc})") from exc
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidInputError(f"{what}: expected a non-empty 2-D matrix, got shape {arr.shape}")
    bad = ~np.isfinite(arr)
    if bad.any():
        f, n = (int(i) for i in np.argwhere(bad)[0])
        raise MatrixValidationError(f"{what}: non-finite entry at (row {f}, col {n})", row=f, col=n)
    negative = arr < 0
    if negative.any():
        f, n = (int(i) for i in np.argwhere(negative)[0])
        raise MatrixValidationError(
            f"{what}: negative entry {arr[f, n]!r} at (row {f}, col {n})", row=f, col=n
        )
    arr.setflags(write=False)
    return arr


# --- Domain types ---

@dataclass(frozen=True, eq=False)
class NonnegMatrix:
    """Dense nonnegative F x N matrix V with catalog metadata."""

    entries: FloatArray
    name: str = "V"
    known_nonneg_rank: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", _check_entries(self.entries, self.name))
        if self.known_nonneg_rank is not None and self.known_nonneg_rank < 1:
            raise InvalidInputError(f"{self.name}: known_nonneg_rank must be positive")

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]

    @property
    def shape(self):
        return self.entries.shape

    def __getitem__(self, index):
        return self.entries[index]


@dataclass(frozen=True, eq=False)
class FactorPair:
    """(W, H) with W: F x K and H: K x N, both nonnegative."""

    W: FloatArray
    H: FloatArray

    def __post_init__(self) -> None:
        W = _check_entries(self.W, "W")
        H = _check_entries(self.H, "H")
        if W.shape[1] != H.shape[0]:
            raise InvalidInputError(f"inner dimensions differ: W is {W.shape}, H is {H.shape}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "H", H)

    @property
    def rank(self) -> int:
        return self.W.shape[1]

    def product(self) -> FloatArray:
        return self.W @ self.H


def as_array(V: Union[NonnegMatrix, npt.ArrayLike]) -> FloatArray:
    if isinstance(V, NonnegMatrix):
        return V.entries
    return np.asarray(V, dtype=np.float64)


def relative_error(V: Union[NonnegMatrix, npt.ArrayLike], P: FactorPair) -> float:
    """||V - WH||_F / ||V||_F."""
    Vm = as_array(V)
    WH = P.W @ P.H
    if WH.shape != Vm.shape:
        raise ContractViolation(f"factor product has shape {WH.shape}, target has {Vm.shape}")
    norm = float(np.linalg.norm(Vm))
    if norm == 0.0:
        raise InvalidInputError("relative error is undefined for an all-zero matrix")
    return float(np.linalg.norm(Vm - WH) / norm)


# --- Generators ---

def gen_random_factors(F: int, N: int, K: int, seed: int) -> FactorPair:
    """Uniform-[0,1] factors; their product has nonnegative rank K with probability one."""
    if F < 1 or N < 1:
        raise InvalidInputError(f"matrix dimensions must be positive, got {F}x{N}")
    if K < 1 or K > min(F, N):
        raise InvalidInputError(f"rank K={K} must lie in [1, min(F, N)] = [1, {min(F, N)}]")
    rng = np.random.default_rng(seed)
    W = rng.uniform(0.0, 1.0, size=(F, K))
    H = rng.uniform(0.0, 1.0, size=(K, N))
    return FactorPair(W=W, H=H)


def gen_random_product(F: int, N: int, K: int, seed: int) -> NonnegMatrix:
    factors = gen_random_factors(F, N, K, seed)
    return NonnegMatrix(
        entries=factors.product(),
        name=f"random_{F}x{N}_k{K}_s{seed}",
        known_nonneg_rank=K,
    )


# --- Builtin catalog ---

# 5x5 infinitesimally rigid instances, nonnegative rank 4
RIGID_MATRICES: Dict[str, List[List[int]]] = {
    "Vinf1": [
        [573705, 806520, 167622, 246500, 531659],
        [397096, 39600, 299176, 63720, 274120],
        [131646, 403260, 30269, 226915, 264510],
        [9114, 85160, 311182, 827468, 851798],
        [147857, 3200, 351037, 599025, 697755],
    ],
    "Vinf2": [
        [30893, 319912, 149770, 873, 111428],
        [383490, 87990, 5580, 628440, 587250],
        [560076, 1030324, 331070, 288045, 350647],
        [203830, 305184, 277512, 264376, 205933],
        [90911, 142936, 500784, 618842, 609633],
    ],
    "Vinf3": [
        [948201, 723609, 958755, 591858, 397953],
        [222448, 218040, 30429, 348793, 15825],
        [329588, 7189, 623001, 12012, 469185],
        [467424, 160704, 115092, 835504, 343912],
        [1114797, 932972, 975775, 997164, 636096],
    ],
    "Vinf4": [
        [88076, 294646, 658787, 902872, 244559],
        [2216, 4216, 596705, 652698, 250465],
        [279360, 180864, 769506, 1051380, 391634],
        [553284, 826606, 765406, 293965, 883775],
        [696039, 897917, 148301, 832169, 169525],
    ],
}
RIGID_RANK = 4

# entry codes of the nested-hexagon slack matrix: 0 -> 1, 1 -> x, 2 -> 2x - 1 (all divided by x);
# the codes themselves are the a -> infinity limit
HEXAGON_CODES = np.array([
    [0, 1, 2, 2, 1, 0],
    [0, 0, 1, 2, 2, 1],
    [1, 0, 0, 1, 2, 2],
    [2, 1, 0, 0, 1, 2],
    [2, 2, 1, 0, 0, 1],
    [1, 2, 2, 1, 0, 0],
])
HEXAGON_RANKS = {2.0: 3, 3.0: 4, 4.0: 5, math.inf: 5}

_HEX_ALIASES = {"hex_a2": 2.0, "hex_a3": 3.0, "hex_a4": 4.0, "hex_ainf": math.inf, "V_a_inf": math.inf}

CATALOG_NAMES = ["random", *RIGID_MATRICES, "hex_a2", "hex_a3", "hex_a4", "hex_ainf", "appB_example"]


def hexagon_matrix(a: float, name: Optional[str] = None) -> NonnegMatrix:
    """Slack matrix of the nested hexagons with parameter a > 1 (a = inf gives the limit matrix)."""
    if not a > 1:
        raise InvalidInputError(f"hexagon parameter must exceed 1, got {a}")
    if math.isinf(a):
        entries = HEXAGON_CODES.astype(np.float64)
    else:
        x = float(a)
        values = np.array([1.0, x, 2.0 * x - 1.0])
        entries = values[HEXAGON_CODES] / x
    label = name or ("hex_ainf" if math.isinf(a) else f"hex_a{a:g}")
    return NonnegMatrix(entries=entries, name=label, known_nonneg_rank=HEXAGON_RANKS.get(float(a)))


def builtin_matrix(
    name: str,
    a: Optional[float] = None,
    F: int = 10,
    N: int = 10,
    K: int = 5,
    seed: int = 0,
) -> NonnegMatrix:
    """Look up a catalog instance; "random" and "V_a" take generator parameters."""
    if name in RIGID_MATRICES:
        return NonnegMatrix(entries=RIGID_MATRICES[name], name=name, known_nonneg_rank=RIGID_RANK)
    if name in _HEX_ALIASES:
        return hexagon_matrix(_HEX_ALIASES[name], name=name)
    if name == "appB_example":
        return NonnegMatrix(entries=HEXAGON_CODES, name=name, known_nonneg_rank=5)
    if name == "V_a":
        if a is None:
            raise InvalidInputError("instance 'V_a' needs the hexagon parameter a")
        return hexagon_matrix(a)
    if name == "random":
        return gen_random_product(F, N, K, seed)
    raise UnknownInstanceError(f"unknown instance '{name}'; known: {', '.join(CATALOG_NAMES)}, V_a")


def default_rank(V: NonnegMatrix) -> Optional[int]:
    if V.name in RIGID_MATRICES:
        return RIGID_RANK
    return V.known_nonneg_rank


def default_maxiter(name: str) -> int:
    return config.MAXITER_RIGID if name in RIGID_MATRICES else config.MAXITER_DEFAULT


# --- CSV plumbing ---

def load_matrix(path: PathLike) -> NonnegMatrix:
    """Read a matrix stored as a "F,N" header followed by F rows of N comma-separated reals."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise MatrixParseError(f"cannot read {path}: {exc}") from exc

    rows = [row for row in csv.reader(text.splitlines()) if any(cell.strip() for cell in row)]
    if not rows:
        raise MatrixParseError(f"{path}: empty file")
    try:
        F, N = (int(cell) for cell in rows[0])
    except ValueError as exc:
        raise MatrixParseError(f"{path}: header must be 'F,N', got {','.join(rows[0])!r}") from exc

    body = rows[1:]
    if len(body) != F:
        raise MatrixParseError(f"{path}: header announces {F} rows, found {len(body)}")
    values = []
    for f, row in enumerate(body):
        if len(row) != N:
            raise MatrixParseError(f"{path}: row {f} has {len(row)} entries, expected {N}")
        try:
            values.append([float(cell) for cell in row])
        except ValueError as exc:
            raise MatrixParseError(f"{path}: row {f}: {exc}") from exc
    return NonnegMatrix(entries=values, name=path.stem)


def save_matrix(matrix: Union[NonnegMatrix, npt.ArrayLike], path: PathLike) -> Path:
    """Write in the load_matrix format with 17 significant digits (exact float round trip)."""
    arr = as_array(matrix)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([arr.shape[0], arr.shape[1]])
        for row in arr:
            writer.writerow([format(float(x), ".17g") for x in row])
    return path


def save_report(report: BaseModel, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
    return path
