from pydantic import BaseModel, Field
from typing import Dict, List, Optional


class LikelihoodState(BaseModel):
    t: float = Field(..., description="Current time")
    T: float = Field(..., gt=0.0, description="Horizon")
    r: float = Field(..., ge=0.0, description="Radial distance to the target")
    z: List[float] = Field(..., description="Driver state Z_t")
    xi: List[float] = Field(..., description="Frame coordinates of the unit radial direction, zero in the cut band")
    log_phi: float = Field(default=0.0, description="Accumulated log likelihood ratio")
    log_psi: float = Field(default=0.0, description="Gaussian-type factor log psi_t")
    local_time_accum: float = Field(default=0.0, ge=0.0, description="Time spent in the cut band (diagnostic)")
    eta_accum: float = Field(default=0.0, description="Integral of d_r log Theta^(-1/2)")
    expansion_remainder: float = Field(default=0.0, description="Discrete product-rule terms beyond the Ito expansion of g")


class GFunctionTerms(BaseModel):
    """Coefficients of the Ito expansion of g(t, r, z, xi) = r^2/(T-t) |sigma^-1 xi|^2."""

    g: float = Field(..., description="g itself")
    q: float = Field(..., description="xi^T A xi")
    E: float = Field(..., description="|sigma^-1 xi|^2 r^2/(T-t)^2")
    F: float = Field(..., description="dg/dr")
    G: float = Field(..., description="d2g/dr2")
    H: List[float] = Field(..., description="d2g/(dr dz_j)")
    I: List[float] = Field(..., description="d2g/(dr dxi_j)")
    J: List[float] = Field(..., description="dg/dxi_j")
    J2: List[List[float]] = Field(..., description="d2g/(dxi_i dxi_j)")
    K: List[List[float]] = Field(..., description="d2g/(dxi_i dz_j)")
    A: List[List[float]] = Field(..., description="(sigma sigma^T)^-1")


class GeneralStep(BaseModel):
    """Data of one guided step for the general likelihood accumulator."""

    dt: float = Field(..., ge=0.0)
    r_next: float = Field(..., ge=0.0)
    z_next: List[float]
    xi_next: List[float]
    dW: List[float] = Field(..., description="Standard Brownian increment of the step")


class LikelihoodSummary(BaseModel):
    log_phi: float
    log_psi: float
    cut_crossings: int
    eta_accum: float
    log_phi_general: Optional[float] = None
    extra: Dict[str, float] = Field(default_factory=dict)
