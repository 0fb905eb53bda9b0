from pydantic import BaseModel, Field
from typing import List


class GeodesicSolution(BaseModel):
    surface_id: str = Field(..., description="Surface id the geodesic lives on")
    chart_path: List[List[float]] = Field(..., description="Chart coordinates q(s) at the collocation nodes")
    chart_velocity: List[List[float]] = Field(..., description="Chart velocities dq/ds at the nodes (s in [0, 1])")
    ambient_path: List[List[float]] = Field(..., description="Embedded points at the nodes")
    initial_velocity: List[float] = Field(..., description="Ambient initial velocity, the Log of the endpoint")
    length: float = Field(..., ge=0.0, description="Geodesic length")
    converged: bool = Field(..., description="Endpoint residual within tolerance")
    residual: float = Field(..., description="Endpoint residual in chart coordinates")
    near_cut: bool = Field(default=False, description="A second geodesic class ties in length")
    distance_to_cut: float = Field(default=0.0, ge=0.0, description="Half the length gap to the next geodesic class")
    candidates_converged: int = Field(default=1, description="Number of shooting restarts that converged")
