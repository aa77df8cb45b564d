"""
Conic Program Data Model
minimize c.z  subject to  G z + s = h,  s in K_1 x ... x K_m,  lower <= z <= upper

Cones are 3-dimensional (exponential, rotated second-order) or scalar (ray, box) and
constrain disjoint row blocks of the slack s.
"""

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO, Tuple, Union

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp
from scipy.optimize import minimize_scalar

FloatArray = npt.NDArray[np.float64]


class ConeKind(str, Enum):
    EXP3 = "exp3"
    RSOC3 = "rsoc3"
    NONNEG = "nonneg"
    BOX = "box"


CONE_DIMS = {ConeKind.EXP3: 3, ConeKind.RSOC3: 3, ConeKind.NONNEG: 1, ConeKind.BOX: 1}


@dataclass(frozen=True)
class Cone:
    kind: ConeKind
    rows: Tuple[int, ...]
    lower: float = -math.inf
    upper: float = math.inf

    @classmethod
    def exp3(cls, rows: Sequence[int]) -> "Cone":
        return cls(ConeKind.EXP3, tuple(int(r) for r in rows))

    @classmethod
    def rsoc3(cls, rows: Sequence[int]) -> "Cone":
        return cls(ConeKind.RSOC3, tuple(int(r) for r in rows))

    @classmethod
    def ray(cls, row: int) -> "Cone":
        return cls(ConeKind.NONNEG, (int(row),))

    @classmethod
    def box(cls, row: int, lower: float = -math.inf, upper: float = math.inf) -> "Cone":
        return cls(ConeKind.BOX, (int(row),), float(lower), float(upper))

    @property
    def dim(self) -> int:
        return CONE_DIMS[self.kind]


@dataclass(frozen=True, eq=False)
class ConicProgram:
    nvars: int
    c: FloatArray
    G: sp.csr_matrix
    h: FloatArray
    cones: Tuple[Cone, ...]
    lower: Optional[FloatArray] = None
    upper: Optional[FloatArray] = None
    name: str = "program"
    # shared by every with_objective() copy; holds the solver's standard form
    cache: Dict[str, Any] = field(default_factory=dict, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "c", np.asarray(self.c, dtype=np.float64).ravel())
        object.__setattr__(self, "h", np.asarray(self.h, dtype=np.float64).ravel())
        G = self.G if sp.issparse(self.G) else np.atleast_2d(np.asarray(self.G, dtype=np.float64))
        object.__setattr__(self, "G", sp.csr_matrix(G, dtype=np.float64))
        lower = np.full(self.nvars, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=np.float64)
        upper = np.full(self.nvars, np.inf) if self.upper is None else np.asarray(self.upper, dtype=np.float64)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        object.__setattr__(self, "cones", tuple(self.cones))

    @property
    def nrows(self) -> int:
        return self.G.shape[0]

    def with_objective(self, c: npt.ArrayLike) -> "ConicProgram":
        """Same feasible set, new objective."""
        return dataclasses.replace(self, c=np.asarray(c, dtype=np.float64))

    def slack(self, z: npt.ArrayLike) -> FloatArray:
        return self.h - self.G @ np.asarray(z, dtype=np.float64)


def validate(program: ConicProgram) -> List[str]:
    """Dimension and partition checks; an empty list means the program is well formed."""
    diagnostics: List[str] = []
    n, m = program.nvars, program.h.shape[0]
    if program.c.shape[0] != n:
        diagnostics.append(f"objective has length {program.c.shape[0]}, expected nvars={n}")
    if program.G.shape != (m, n):
        diagnostics.append(f"G has shape {program.G.shape}, expected ({m}, {n})")
    for label, bound in (("lower", program.lower), ("upper", program.upper)):
        if bound.shape != (n,):
            diagnostics.append(f"{label} bounds have shape {bound.shape}, expected ({n},)")
    if program.lower.shape == program.upper.shape == (n,):
        crossed = np.flatnonzero(program.lower > program.upper)
        if crossed.size:
            diagnostics.append(f"variable {int(crossed[0])} has lower bound above upper bound")

    owner = np.full(m, -1, dtype=np.int64)
    for index, cone in enumerate(program.cones):
        if len(cone.rows) != cone.dim:
            diagnostics.append(f"cone {index} ({cone.kind.value}) has {len(cone.rows)} rows, expected {cone.dim}")
            continue
        if cone.kind is ConeKind.BOX and cone.lower > cone.upper:
            diagnostics.append(f"cone {index} is an empty box [{cone.lower}, {cone.upper}]")
        for row in cone.rows:
            if not 0 <= row < m:
                diagnostics.append(f"cone {index} references row {row} outside 0..{m - 1}")
            elif owner[row] >= 0:
                diagnostics.append(f"row {row} covered by cones {int(owner[row])} and {index}")
            else:
                owner[row] = index
    uncovered = np.flatnonzero(owner < 0)
    if uncovered.size:
        diagnostics.append(f"row {int(uncovered[0])} not covered by any cone ({uncovered.size} uncovered)")
    return diagnostics


# --- Membership ---

def _rsoc_distance(x: FloatArray) -> float:
    # rotate onto the standard second-order cone: (x1, x2, x3) -> ((x1+x2)/sqrt2, (x1-x2)/sqrt2, x3)
    top = (x[0] + x[1]) / math.sqrt(2.0)
    tail = math.hypot((x[0] - x[1]) / math.sqrt(2.0), x[2])
    if tail <= top:
        return 0.0
    if tail <= -top:
        return float(np.linalg.norm(x))
    return (tail - top) / math.sqrt(2.0)


def _exp_inside(x: FloatArray) -> bool:
    x1, x2, x3 = x
    if x2 > 0:
        return x1 > 0 and x2 * math.log(x1 / x2) >= x3
    return x2 == 0 and x1 >= 0 and x3 <= 0


def _exp_distance(x: FloatArray) -> float:
    if _exp_inside(x):
        return 0.0
    x1, x2, x3 = (float(v) for v in x)
    # closure branch {(a, 0, b): a >= 0, b <= 0}
    best = math.sqrt(min(x1, 0.0) ** 2 + x2 ** 2 + max(x3, 0.0) ** 2)
    if x2 > 0:
        # raise x1, or lower x3, onto the boundary
        with np.errstate(over="ignore"):
            best = min(best, float(np.exp(x3 / x2)) * x2 - x1)
        if x1 > 0:
            best = min(best, x3 - x2 * math.log(x1 / x2))

    # the smooth boundary is the union of rays y*(e^r, 1, r), y > 0
    def ray_distance(r: float) -> float:
        d = np.array([math.exp(r), 1.0, r])
        y = max(0.0, float(d @ x)) / float(d @ d)
        return float(np.linalg.norm(x - y * d))

    grid = np.linspace(-40.0, 40.0, 1601)
    values = [ray_distance(r) for r in grid]
    i = int(np.argmin(values))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    polished = minimize_scalar(ray_distance, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    return min(best, values[i], float(polished.fun))


def cone_distance(cone: Union[Cone, ConeKind], x: npt.ArrayLike) -> float:
    """Euclidean distance from x to the (closed) cone."""
    kind = cone.kind if isinstance(cone, Cone) else ConeKind(cone)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape[0] != CONE_DIMS[kind]:
        raise ValueError(f"{kind.value} cone has dimension {CONE_DIMS[kind]}, got a {x.shape[0]}-vector")
    if kind is ConeKind.EXP3:
        return _exp_distance(x)
    if kind is ConeKind.RSOC3:
        return _rsoc_distance(x)
    if kind is ConeKind.NONNEG:
        return max(0.0, -float(x[0]))
    lower = cone.lower if isinstance(cone, Cone) else -math.inf
    upper = cone.upper if isinstance(cone, Cone) else math.inf
    return max(0.0, lower - float(x[0]), float(x[0]) - upper)


def membership(cone: Union[Cone, ConeKind], x: npt.ArrayLike, tol: float = 1e-9) -> bool:
    return cone_distance(cone, x) <= tol


# --- Debug dump ---

def dump_program(program: ConicProgram, target: Union[str, Path, TextIO]) -> None:
    """Plain-text dump: objective, triplet-form G, h, bounds and cone list."""
    if isinstance(target, (str, Path)):
        with Path(target).open("w", encoding="utf-8") as handle:
            _write_dump(program, handle)
    else:
        _write_dump(program, target)


def _write_dump(program: ConicProgram, out: TextIO) -> None:
    G = program.G.tocoo()
    out.write(f"# conic program {program.name}\n")
    out.write(f"nvars {program.nvars}\nnrows {program.nrows}\nnnz {G.nnz}\n")
    out.write("objective\n")
    for j in np.flatnonzero(program.c):
        out.write(f"{j} {program.c[j]:.17g}\n")
    out.write("G\n")
    for i, j, v in sorted(zip(G.row.tolist(), G.col.tolist(), G.data.tolist())):
        out.write(f"{i} {j} {v:.17g}\n")
    out.write("h\n")
    for i in np.flatnonzero(program.h):
        out.write(f"{i} {program.h[i]:.17g}\n")
    out.write("bounds\n")
    for j in range(program.nvars):
        if np.isfinite(program.lower[j]) or np.isfinite(program.upper[j]):
            out.write(f"{j} {program.lower[j]:.17g} {program.upper[j]:.17g}\n")
    out.write("cones\n")
    for index, cone in enumerate(program.cones):
        rows = " ".join(str(r) for r in cone.rows)
        extra = f" {cone.lower:.17g} {cone.upper:.17g}" if cone.kind is ConeKind.BOX else ""
        out.write(f"{index} {cone.kind.value} {rows}{extra}\n")
