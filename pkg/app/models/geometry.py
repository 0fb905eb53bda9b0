from pydantic import BaseModel, Field, field_validator
from typing import List
import math


class ManifoldPoint(BaseModel):
    manifold_id: str = Field(..., description="Manifold or surface id, e.g. 'sphere2', 'torus:2,1'")
    coords: List[float] = Field(..., description="Public coordinates (embedding for spheres, angles for flat manifolds, row-major 3x3 matrix for so3, chart coordinates for surfaces)")

    @field_validator("coords")
    @classmethod
    def coords_finite(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("coords must not be empty")
        if not all(math.isfinite(c) for c in v):
            raise ValueError("coords must be finite")
        return v

    class Config:
        json_schema_extra = {
            "example": {
                "manifold_id": "sphere2",
                "coords": [0.0, 0.0, 1.0],
            }
        }


class TangentVector(BaseModel):
    base: ManifoldPoint = Field(..., description="Base point of the tangent space")
    components: List[float] = Field(..., description="Components in the base point's representation (flattened skew matrix for so3)")
    near_cut: bool = Field(default=False, description="Set by log_map when the base lies in the cut-locus band of the target")

    class Config:
        json_schema_extra = {
            "example": {
                "base": {"manifold_id": "sphere2", "coords": [1.0, 0.0, 0.0]},
                "components": [0.0, 1.5707963267948966, 0.0],
                "near_cut": False,
            }
        }


class FramePoint(BaseModel):
    base: ManifoldPoint = Field(..., description="Base point")
    frame: List[List[float]] = Field(..., description="d orthonormal tangent vectors, public representation")


class CutLocusInfo(BaseModel):
    is_near_cut: bool = Field(..., description="Point lies within the cut-locus band of the target")
    distance_to_cut: float = Field(..., ge=0.0, description="Geodesic distance to the cut locus, zero inside the band")
