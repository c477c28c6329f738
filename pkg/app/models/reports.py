from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field


class TrajectoryKnot(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    t: float
    x: np.ndarray


class SolverReport(BaseModel):
    """Result of integrating one batch from t=1 to t=0"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    endpoint: np.ndarray = Field(..., description="x at t=0, same shape as the input")
    nfe: int = Field(..., description="Vector-field evaluations consumed")
    accepted: int = Field(0, description="Accepted steps (every step for Euler)")
    rejected: int = Field(0, description="Rejected adaptive steps")
    wall_time: float = Field(0.0, description="Seconds")
    trajectory: Optional[List[TrajectoryKnot]] = Field(None, description="Knots from t=1 down to t=0")


class FrechetStats(BaseModel):
    distance: float
    degenerate: bool = Field(False, description="A covariance was rank-deficient after eigenvalue clipping")


class MetricsReport(BaseModel):
    """One evaluation run; `frechet_gauss` is the FD-analog"""
    label: str = "FD-analog"
    frechet_gauss: float = Field(..., ge=0)
    frechet_degenerate: bool = False
    sliced_wasserstein: float = Field(..., ge=0)
    straightness: Optional[float] = Field(None, ge=0)
    mean_nfe: Optional[float] = None
    time_per_sample: Optional[float] = Field(None, description="Seconds per generated sample")
    n_samples: int
    config: Dict[str, Any] = Field(default_factory=dict, description="Echo of the settings that produced the report")


class EfficiencyReport(BaseModel):
    mean_nfe: float
    time_per_sample: float
    n: int


class ParameterReport(BaseModel):
    """Exact parameter counts of the teacher/student pair"""
    teacher_total: int
    teacher_trunk: int
    student_total: int
    student_trunk: int
    trunk_ratio: float = Field(..., description="student_trunk / teacher_trunk")
    encoder_total: Optional[int] = None
    encoder_dense_equivalent: Optional[int] = Field(None, description="Encoder count with dense convolutions")


class AblationReport(BaseModel):
    """One-step FD-analog of each distillation arm"""
    fg_distill: MetricsReport
    naive_distill: MetricsReport
    no_distill: MetricsReport
    no_anneal: Optional[MetricsReport] = None
