"""
Pydantic Models for Domain Records

This module defines the covariance models, simulation configuration, path
records and experiment reports shared by all services, ensuring type safety
and automatic validation of experiment files.
"""

import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    computed_field,
    field_validator,
    model_validator,
)

from src.core.config import settings
from src.core.exceptions import TimeNotRecorded


def _split_csv(value: Any) -> Any:
    """Accept "0.5, 1, 2" wherever a list of numbers is expected"""
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class CovarianceFamily(str, Enum):
    """Built-in covariation function families"""
    ARRATIA = "arratia"
    EXP_ALPHA = "exp_alpha"
    GAUSSIAN = "gaussian"


class CovarianceModel(BaseModel):
    """A covariation function phi with phi(0) = 1, named by family and parameters"""
    model_config = ConfigDict(frozen=True)

    family: CovarianceFamily = Field(..., description="Covariation function family")
    alpha: Optional[float] = Field(None, description="Exponent of exp(-|x|^alpha), exp_alpha only")

    @model_validator(mode="after")
    def check_alpha(self) -> "CovarianceModel":
        if self.family is CovarianceFamily.EXP_ALPHA:
            if self.alpha is None:
                raise ValueError("exp_alpha requires alpha in (0, 2]")
            if not 0.0 < self.alpha <= 2.0:
                raise ValueError(f"alpha must lie in (0, 2], got {self.alpha}")
        elif self.alpha is not None:
            raise ValueError(f"alpha is only defined for exp_alpha, not {self.family.value}")
        return self

    @property
    def is_continuous(self) -> bool:
        return self.family is not CovarianceFamily.ARRATIA

    def label(self) -> str:
        if self.family is CovarianceFamily.EXP_ALPHA:
            return f"exp_alpha({self.alpha:g})"
        return self.family.value


class IntegralStatus(str, Enum):
    CONVERGENT = "convergent"
    DIVERGENT = "divergent"


class IntegralVerdict(BaseModel):
    """Outcome of one of the integral criteria"""
    status: IntegralStatus
    value: Optional[float] = Field(None, ge=0.0, description="Integral value, convergent only")
    abs_error: float = Field(0.0, ge=0.0, description="Estimated absolute error")
    shells: int = Field(0, ge=0, description="Dyadic shells integrated")

    @model_validator(mode="after")
    def check_value(self) -> "IntegralVerdict":
        if (self.status is IntegralStatus.CONVERGENT) != (self.value is not None):
            raise ValueError("value must be present exactly when the integral converges")
        return self


class GridKind(str, Enum):
    SQRT = "sqrt"
    EXPLICIT = "explicit"
    LOG = "log"


class SimConfig(BaseModel):
    """Full description of a flow simulation"""
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    phi: CovarianceModel
    t_target: float = Field(..., gt=0.0, alias="t", description="Simulation horizon")
    dt: float = Field(..., gt=0.0, description="Euler step")
    grid: GridKind = Field(GridKind.SQRT, description="Initial point rule")
    points: Optional[Tuple[float, ...]] = Field(None, description="Explicit initial points")
    log_level: Optional[int] = Field(None, description="Level index n of the log grid k/ln n")
    replicas: int = Field(1, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    couple_tangent: bool = False
    merge_eps: float = Field(settings.merge_eps, ge=0.0)
    output_times: int = Field(settings.output_times, ge=1)
    checkpoints: Tuple[float, ...] = Field((), description="Extra times to record")

    @model_validator(mode="before")
    @classmethod
    def expand_shorthand(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)

        # phi = "exp_alpha" with a sibling alpha key
        phi = data.get("phi")
        if isinstance(phi, str):
            data["phi"] = {"family": phi, "alpha": data.pop("alpha", None)}
        elif isinstance(phi, CovarianceFamily):
            data["phi"] = {"family": phi, "alpha": data.pop("alpha", None)}

        grid = data.get("grid")
        if isinstance(grid, (list, tuple)):
            data["grid"] = GridKind.EXPLICIT
            data["points"] = tuple(grid)
        elif isinstance(grid, str) and grid not in {kind.value for kind in GridKind}:
            data["grid"] = GridKind.EXPLICIT
            data["points"] = tuple(_split_csv(grid))

        t = data.get("t", data.get("t_target"))
        if data.get("dt") is None and isinstance(t, (int, float)) and t > 0:
            data["dt"] = t / settings.dt_divisor
        return data

    @field_validator("checkpoints", mode="before")
    @classmethod
    def split_checkpoints(cls, value: Any) -> Any:
        return _split_csv(value)

    @model_validator(mode="after")
    def check_consistency(self) -> "SimConfig":
        if self.dt > self.t_target:
            raise ValueError(f"dt={self.dt} exceeds t={self.t_target}")
        if self.grid is GridKind.SQRT and self.t_target > 1.0:
            raise ValueError("sqrt grid requires 0 < t <= 1")
        if self.grid is GridKind.EXPLICIT:
            if not self.points:
                raise ValueError("explicit grid needs at least one point")
            if any(b <= a for a, b in zip(self.points, self.points[1:])):
                raise ValueError("grid points must be strictly increasing")
        if self.grid is GridKind.LOG and (self.log_level is None or self.log_level < 3):
            raise ValueError("log grid needs log_level >= 3")
        return self

    @property
    def n_steps(self) -> int:
        ratio = self.t_target / self.dt
        return max(1, math.ceil(ratio - 1e-9 * ratio))

    @property
    def step(self) -> float:
        """Step actually used so that n_steps * step == t_target"""
        return self.t_target / self.n_steps


class FlowPathRecord(BaseModel):
    """Labeled particle positions on the recording grid, with partition history"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    times: np.ndarray = Field(..., description="Increasing recorded times, starting at 0")
    values: np.ndarray = Field(..., description="Positions, shape (times, labels)")
    cluster_ids: np.ndarray = Field(..., description="Cluster index per label, shape (times, labels)")
    cluster_counts: np.ndarray = Field(..., description="Number of clusters per recorded time")
    dt: float
    replica: int = 0

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    def time_index(self, t: float) -> int:
        """Index of a recorded time, matched to relative precision"""
        hits = np.flatnonzero(np.isclose(self.times, t, rtol=1e-9, atol=1e-15))
        if hits.size == 0:
            raise TimeNotRecorded(f"time {t!r} is not among the {self.times.size} recorded times")
        return int(hits[0])


class CoupledPathRecord(BaseModel):
    """Flow X and tangent process Y driven by jointly Gaussian increments"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: FlowPathRecord
    y: FlowPathRecord
    qv_path: Optional[np.ndarray] = Field(
        None, description="Per-step quadratic-variation gap of X - Y at the recorded times"
    )


class DeviationSeries(BaseModel):
    """Per-level statistics along the geometric sequence t_n = q^n"""
    kind: str = Field(..., description="lil or coupling")
    q: float
    levels: List[int]
    t_values: List[float]
    mean: List[float] = Field(..., description="Mean of the sup statistic")
    median: List[float]
    stderr: List[float]
    mean_running_sup: List[Optional[float]] = Field(default_factory=list)
    norm_tlogt: List[float] = Field(..., description="sqrt(t ln 1/t)")
    norm_tloglogt: List[float] = Field(..., description="sqrt(2 t lnln 1/t)")
    ratio_tlogt: List[float]
    ratio_tloglogt: List[float]
    e_t: List[Optional[float]] = Field(default_factory=list)
    e_t_stderr: List[Optional[float]] = Field(default_factory=list)
    centered_mean: List[Optional[float]] = Field(default_factory=list)
    centered_iqr: List[Optional[float]] = Field(default_factory=list)
    gap_ratio_median: List[Optional[float]] = Field(
        default_factory=list, description="median gap / sqrt(t lnln 1/t), coupling only"
    )
    qv_ratio_median: List[Optional[float]] = Field(
        default_factory=list, description="median qv_gap / t, coupling only"
    )
    min_label_gap: List[float] = Field(
        default_factory=list, description="Smallest neighbouring-label gap over every recorded state"
    )
    count_increases: List[int] = Field(
        default_factory=list, description="Cluster-count increases summed over replicas"
    )

    @model_validator(mode="after")
    def check_levels(self) -> "DeviationSeries":
        if any(b >= a for a, b in zip(self.t_values, self.t_values[1:])):
            raise ValueError("t_values must be strictly decreasing")
        if any(s < 0 for s in self.stderr):
            raise ValueError("stderr must be non-negative")
        return self


class ComparisonReport(BaseModel):
    """Expected maxima of two equicorrelated Gaussian vectors"""
    dim: int
    rho_m: float
    rho_n: float
    e_max_m: float
    e_max_n: float
    stderr_m: float = Field(..., ge=0.0)
    stderr_n: float = Field(..., ge=0.0)
    closed_form_n: Optional[float] = None
    sigmas: float = settings.verdict_sigmas

    @computed_field
    @property
    def verdict(self) -> bool:
        return self.e_max_m <= self.e_max_n + self.sigmas * (self.stderr_m + self.stderr_n)


class InterpolationResult(BaseModel):
    """Both sides of the interpolation identity"""
    function: str
    lhs: float
    rhs: float
    stderr: float = Field(..., ge=0.0)
    rhs_refined: Optional[float] = Field(None, description="RHS with doubled quadrature nodes")
    refinement_stderr: float = Field(0.0, ge=0.0, description="Stderr of rhs - rhs_refined")
    sigmas: float = settings.verdict_sigmas

    @computed_field
    @property
    def verdict(self) -> bool:
        return abs(self.lhs - self.rhs) <= self.sigmas * self.stderr + 1e-12

    @computed_field
    @property
    def refinement_verdict(self) -> bool:
        """The RHS is stable when the quadrature nodes double"""
        if self.rhs_refined is None:
            return True
        return abs(self.rhs - self.rhs_refined) <= self.sigmas * self.refinement_stderr + 1e-12


class ConcentrationReport(BaseModel):
    """Exponential-moment and tail checks for the coordinate maximum"""
    dim: int
    lipschitz: float = 1.0
    e_f: float
    lambda_grid: List[float]
    c_grid: List[float]
    empirical_log_mgf: List[float]
    log_mgf_stderr: List[float]
    mgf_bound: List[float]
    empirical_tail: List[float]
    tail_stderr: List[float]
    tail_bound: List[float]
    chernoff_bound: List[float]
    mgf_verdicts: List[bool]
    tail_verdicts: List[bool]

    @property
    def passed(self) -> bool:
        return all(self.mgf_verdicts) and all(self.tail_verdicts)


class Verdict(BaseModel):
    """A single pass/fail check with the numbers it was decided on"""
    name: str
    passed: bool
    observed: Optional[float] = None
    bound: Optional[float] = None
    slack: float = 0.0
    detail: str = ""


class ExperimentKind(str, Enum):
    SIMULATE = "simulate"
    LIL = "lil"
    COUPLING = "coupling"
    COMPARISON = "comparison"
    CONCENTRATION = "concentration"
    COVARIANCE = "covariance"


FLOW_KINDS = {
    ExperimentKind.SIMULATE,
    ExperimentKind.LIL,
    ExperimentKind.COUPLING,
    ExperimentKind.COVARIANCE,
}


class AnalysisParams(BaseModel):
    """Analysis-side parameters of an experiment"""
    model_config = ConfigDict(frozen=True)

    q: float = Field(0.5, gt=0.0, lt=1.0)
    n_min: int = Field(7, ge=1)
    n_max: int = Field(10, ge=1)
    replicas: Optional[int] = Field(None, ge=1, description="Defaults to sim.replicas")
    seed: Optional[int] = Field(None, ge=0, lt=2**64, description="Defaults to sim.seed")
    e_replicas: int = Field(4000, ge=2, description="Replicas behind each E(t) estimate")
    band: float = Field(settings.ratio_band, ge=0.0)
    oracle_band: float = Field(0.15, ge=0.0, description="Relative band around the iid-max oracle")
    e_oracle_band: float = Field(0.02, ge=0.0, description="Relative band of E(t) against its oracle")
    ratio_t_max: float = Field(1e-3, gt=0.0, description="Ratio bands apply for t <= this")
    centered_bound: float = Field(2.0, gt=0.0)
    iqr_bound: float = Field(4.0, gt=0.0)
    allowed_inversions: int = Field(1, ge=0)
    shrink_factor: float = Field(0.5, gt=0.0)
    rho_grid: Tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 0.95)
    dims: Tuple[int, ...] = (2, 4, 8)
    lambda_grid: Tuple[float, ...] = (0.5, 1.0, 2.0)
    c_grid: Tuple[float, ...] = (0.5, 1.0, 2.0)
    closed_form_band: float = Field(0.01, ge=0.0, description="Relative band of the 2-D closed form")
    closed_form_replicas: int = Field(1_000_000, ge=2, description="Samples behind each closed-form check")
    interpolation_pairs: int = Field(20, ge=0)
    interpolation_dim: int = Field(4, ge=2)
    eps: float = Field(0.5, gt=0.0, le=1.0)
    tol: float = Field(1e-4, gt=0.0)

    @field_validator("rho_grid", "dims", "lambda_grid", "c_grid", mode="before")
    @classmethod
    def split_lists(cls, value: Any) -> Any:
        return _split_csv(value)

    @model_validator(mode="after")
    def check_levels(self) -> "AnalysisParams":
        if self.n_max < self.n_min:
            raise ValueError(f"n_max={self.n_max} is below n_min={self.n_min}")
        return self


class ExperimentSpec(BaseModel):
    """One experiment as described by a spec file"""
    name: str
    kind: ExperimentKind
    sim: Optional[SimConfig] = None
    analysis: AnalysisParams = Field(default_factory=AnalysisParams)
    output_dir: Path = Path("out")

    @model_validator(mode="after")
    def check_kind(self) -> "ExperimentSpec":
        if self.kind in FLOW_KINDS and self.sim is None:
            raise ValueError(f"{self.kind.value} experiments need a [sim] section with phi")
        if self.kind is ExperimentKind.COUPLING:
            if not self.sim.phi.is_continuous:
                raise ValueError("coupling experiments need a continuous phi")
            if not self.sim.couple_tangent:
                raise ValueError("coupling experiments need sim.couple_tangent = true")
        return self

    @property
    def seed(self) -> int:
        if self.analysis.seed is not None:
            return self.analysis.seed
        return self.sim.seed if self.sim is not None else 0

    @property
    def replicas(self) -> int:
        if self.analysis.replicas is not None:
            return self.analysis.replicas
        return self.sim.replicas if self.sim is not None else 10_000


class ExperimentReport(BaseModel):
    """Everything needed to audit and re-run an experiment"""
    name: str
    kind: ExperimentKind
    version: str
    seed: int
    spec: Dict[str, Any]
    verdicts: List[Verdict]
    results: Dict[str, Any] = Field(default_factory=dict)

    @computed_field
    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)
