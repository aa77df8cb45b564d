# conic_nmf/schemas.py (pydantic v2 report models)

from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator


class RunStatus(str, Enum):
    SUCCESS = "success"
    COMPLETED = "completed"   # ran to the end without reaching the success tolerance
    ABORTED = "aborted"


# --- one LMO solve ---
class IterationStats(BaseModel):
    status: str
    outer_iterations: int
    newton_steps: int
    objective: float
    complementarity: float
    seconds: float
    warm_start: bool = True


# --- sparsity pattern integration ---
class SpiEvent(BaseModel):
    iteration: int
    added_U: List[Tuple[int, int]]
    added_T: List[Tuple[int, int]]
    phi_before: float
    phi_after: float
    rel_err_before: float
    rolled_back: bool = False
    phase1: bool = False
    warnings: List[str] = Field(default_factory=list)


# --- single factorization run ---
class RunReport(BaseModel):
    model_config = ConfigDict(use_enum_values=True)

    instance: str
    rows: int
    cols: int
    rank: int
    formulation: str
    step_rule: str
    seed: Optional[int] = None
    initializer: str = "uniform"
    maxiter: int
    spi_schedule: List[int] = Field(default_factory=list)
    spi_threshold: float
    factor_bound: float
    zero_shift: float = 0.0

    phi0: float
    phi_lb: float
    rel_err0: float

    phi: List[float] = Field(default_factory=list)
    gap: List[float] = Field(default_factory=list)
    min_gap: List[float] = Field(default_factory=list)
    rel_err: List[float] = Field(default_factory=list)
    tau: List[float] = Field(default_factory=list)
    spi_events: List[SpiEvent] = Field(default_factory=list)
    solver_stats: List[IterationStats] = Field(default_factory=list)
    inexact_lmo: List[int] = Field(default_factory=list)  # iterations whose LMO stopped at the outer limit

    W: List[List[float]] = Field(default_factory=list)
    H: List[List[float]] = Field(default_factory=list)
    final_rel_err: float = float("nan")
    rel_err_before_refine: Optional[float] = None
    refined: bool = False
    success: bool = False
    status: RunStatus = RunStatus.COMPLETED
    abort_reason: Optional[str] = None
    rate_check_passed: Optional[bool] = None
    wall_time: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.phi)


# --- multi-initialization campaign ---
class CampaignSummary(BaseModel):
    instance: str
    rows: int
    cols: int
    rank: int
    formulation: str
    initializer: str
    step_rule: str
    maxiter: int
    n_inits: int = Field(ge=1)
    successes: int = Field(ge=0)
    seeds: List[int]
    final_errors: List[float]
    iterations: List[int]
    median_iterations_to_success: Optional[float] = None
    aborted: int = 0
    rate_check_failures: int = 0
    wall_time: float = 0.0

    @model_validator(mode="after")
    def _successes_bounded(self) -> "CampaignSummary":
        if self.successes > self.n_inits:
            raise ValueError(f"successes ({self.successes}) exceed n_inits ({self.n_inits})")
        return self

    def table_cell(self) -> str:
        return f"{self.successes}/{self.n_inits}"
