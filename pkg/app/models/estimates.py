from pydantic import BaseModel, Field
from typing import Any, Dict, List, Optional

from app.models.geometry import ManifoldPoint


class WeightedMean(BaseModel):
    value: float = Field(..., description="Self-normalized importance estimate")
    std_error: float = Field(..., ge=0.0, description="Delta-method standard error")
    ess: float = Field(..., ge=0.0, description="Effective sample size (sum w)^2 / sum w^2")
    paths: int = Field(..., ge=1)
    low_confidence: bool = Field(default=False, description="ESS below the configured floor")


class DensityEstimate(BaseModel):
    value: float = Field(..., gt=0.0, description="Density with respect to Riemannian volume")
    std_error: float = Field(..., ge=0.0)
    ess: float = Field(..., ge=0.0)
    paths: int = Field(..., ge=1, description="Ensemble size M")
    steps: int = Field(..., ge=2, description="Grid size N")
    T: float = Field(..., gt=0.0)
    radial: float = Field(..., ge=0.0, description="d(x0, v)")
    low_confidence: bool = Field(default=False)
    reference: Optional[float] = Field(default=None, description="Closed-form reference when available")

    class Config:
        json_schema_extra = {
            "example": {
                "value": 0.188,
                "std_error": 0.0007,
                "ess": 9950.0,
                "paths": 10000,
                "steps": 1000,
                "T": 1.0,
                "radial": 0.0,
                "low_confidence": False,
                "reference": 0.1887,
            }
        }


class MeanEstimate(BaseModel):
    iterates: List[ManifoldPoint] = Field(..., description="Accepted iterates, initial guess first")
    log_likelihoods: List[float] = Field(..., description="Estimated log likelihood at each iterate")
    gradient_norms: List[float] = Field(default_factory=list, description="Chart gradient norm at each iterate")
    step_sizes: List[float] = Field(default_factory=list, description="Step size used to reach each iterate")
    converged: bool = Field(..., description="Gradient norm fell below the tolerance")
    iterations: int = Field(..., ge=0)
    T: float = Field(..., gt=0.0)


class ProfileRow(BaseModel):
    arc_length: float
    target: List[float]
    estimate: DensityEstimate
    series: Optional[float] = None
    euclidean: float


class SuiteResult(BaseModel):
    name: str
    passed: bool
    metrics: Dict[str, Any] = Field(default_factory=dict)
    duration_ms: float = 0.0
    error: Optional[str] = None


class CheckReport(BaseModel):
    passed: bool
    scale: str
    seed: int
    suites: List[SuiteResult]
