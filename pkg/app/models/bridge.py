from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator


RecordMode = Literal["full", "summary", "terminal"]
LikelihoodMode = Literal["auto", "bm", "general", "both", "none"]
TimeGrid = Literal["uniform", "geometric"]


class DriverSpec(BaseModel):
    """Euclidean driving semimartingale dZ = a(t, Z) dt + sigma(t, Z) dW.

    ``drift`` and ``dispersion`` are evaluated on a batch: ``drift(t, z)`` maps
    (B, d) -> (B, d) and ``dispersion(t, z)`` maps (B, d) -> (B, d, d).
    ``dispersion_dz`` optionally returns dA/dz_j for A = (sigma sigma^T)^-1 as
    an array (B, d, d, d) with the derivative index last.
    """

    dimension: int = Field(..., ge=1, description="Driver dimension d (equals the manifold dimension)")
    drift: Optional[Callable] = Field(default=None, description="Batched drift a(t, z); None means zero drift")
    dispersion: Optional[Callable] = Field(default=None, description="Batched dispersion sigma(t, z); None means the constant matrix")
    dispersion_dz: Optional[Callable] = Field(default=None, description="Analytic dA/dz_j, finite differences otherwise")
    sigma_matrix: Optional[List[List[float]]] = Field(default=None, description="Constant dispersion matrix")
    is_brownian: bool = Field(default=False, description="a = 0 and sigma = I")
    is_constant_sigma: bool = Field(default=False, description="sigma independent of (t, z)")
    name: str = Field(default="custom", description="Label used in logs and reports")

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode="after")
    def check_matrix(self) -> "DriverSpec":
        if self.sigma_matrix is not None:
            mat = np.asarray(self.sigma_matrix, dtype=float)
            if mat.shape != (self.dimension, self.dimension):
                raise ValueError(f"sigma_matrix must be {self.dimension}x{self.dimension}")
        if self.dispersion is None and self.sigma_matrix is None and not self.is_brownian:
            raise ValueError("a dispersion function or a constant sigma_matrix is required")
        return self

    @classmethod
    def brownian(cls, dimension: int) -> "DriverSpec":
        return cls(
            dimension=dimension,
            sigma_matrix=np.eye(dimension).tolist(),
            is_brownian=True,
            is_constant_sigma=True,
            name="brownian",
        )

    @classmethod
    def constant(cls, sigma: List[List[float]], drift_vector: Optional[List[float]] = None) -> "DriverSpec":
        sigma_arr = np.asarray(sigma, dtype=float)
        d = sigma_arr.shape[0]
        drift = None
        if drift_vector is not None:
            a = np.asarray(drift_vector, dtype=float)
            drift = lambda t, z: np.broadcast_to(a, z.shape).copy()  # noqa: E731
        is_identity = drift is None and np.allclose(sigma_arr, np.eye(d), atol=0.0, rtol=0.0)
        return cls(
            dimension=d,
            drift=drift,
            sigma_matrix=sigma_arr.tolist(),
            is_brownian=bool(is_identity),
            is_constant_sigma=True,
            name="brownian" if is_identity else "constant",
        )

    def a(self, t: float, z: np.ndarray) -> np.ndarray:
        if self.drift is None:
            return np.zeros_like(z)
        return np.asarray(self.drift(t, z), dtype=float)

    def sigma(self, t: float, z: np.ndarray) -> np.ndarray:
        if self.dispersion is None:
            mat = np.asarray(self.sigma_matrix if self.sigma_matrix is not None else np.eye(self.dimension), dtype=float)
            return np.broadcast_to(mat, (z.shape[0], self.dimension, self.dimension))
        return np.asarray(self.dispersion(t, z), dtype=float)


class BridgeConfig(BaseModel):
    manifold_id: str = Field(..., description="Manifold or surface id")
    start: List[float] = Field(..., description="Public coordinates of x0")
    target: List[float] = Field(..., description="Public coordinates of the target v")
    T: float = Field(..., gt=0.0, description="Horizon")
    steps: int = Field(..., ge=2, description="Number of grid times N")
    paths: int = Field(default=1, ge=1, description="Ensemble size M")
    master_seed: int = Field(default=0, description="Seed of the per-path stream family")
    guided: bool = Field(default=True, description="Add the radial guiding drift")
    drift_cap: Optional[float] = Field(default=None, gt=0.0, description="Maximum norm of the guiding drift")
    record: RecordMode = Field(default="summary", description="Per-step data kept in the result")
    likelihood: LikelihoodMode = Field(default="auto", description="Likelihood accumulators to run")
    time_grid: TimeGrid = Field(default="uniform", description="Uniform grid or geometric refinement towards T")
    drift_sign: float = Field(default=1.0, description="Sign applied to the guiding drift; -1 is a mutation hook for the check suite")
    chunk_size: Optional[int] = Field(default=None, ge=1, description="Paths per batch, settings.CHUNK_SIZE by default")
    workers: Optional[int] = Field(default=None, ge=1, description="Worker threads, settings.WORKERS by default")

    class Config:
        json_schema_extra = {
            "example": {
                "manifold_id": "sphere2",
                "start": [0.0, 0.0, 1.0],
                "target": [0.0, 0.0, -1.0],
                "T": 1.0,
                "steps": 1000,
                "paths": 4,
                "master_seed": 7,
            }
        }


@dataclass
class BridgePath:
    """One simulated path. Arrays use the internal point representation."""

    path_index: int
    manifold_id: str
    times: np.ndarray
    horizon: float
    terminal_state: np.ndarray
    terminal_radial: float
    log_phi: float
    log_psi: float
    cut_crossings: int
    capped_steps: int
    local_time: float
    eta_accum: float
    log_phi_general: Optional[float] = None
    log_psi_general: Optional[float] = None
    expansion_remainder: Optional[float] = None
    states: Optional[np.ndarray] = None
    frames: Optional[np.ndarray] = None
    increments: Optional[np.ndarray] = None
    radials: Optional[np.ndarray] = None
    radial_drive: Optional[np.ndarray] = None
    log_phi_partial: Optional[np.ndarray] = None
    failed_step: Optional[int] = None


@dataclass
class BridgeEnsemble(Sequence):
    """Batched storage of M paths; indexing yields :class:`BridgePath` views."""

    manifold_id: str
    config: BridgeConfig
    times: np.ndarray
    path_indices: np.ndarray
    terminal_states: np.ndarray
    terminal_radials: np.ndarray
    log_phi: np.ndarray
    log_psi: np.ndarray
    cut_crossings: np.ndarray
    capped_steps: np.ndarray
    local_time: np.ndarray
    eta_accum: np.ndarray
    failed_steps: np.ndarray
    log_phi_general: Optional[np.ndarray] = None
    log_psi_general: Optional[np.ndarray] = None
    expansion_remainder: Optional[np.ndarray] = None
    states: Optional[np.ndarray] = None
    frames: Optional[np.ndarray] = None
    increments: Optional[np.ndarray] = None
    radials: Optional[np.ndarray] = None
    radial_drive: Optional[np.ndarray] = None
    log_phi_partial: Optional[np.ndarray] = None
    duration_ms: float = field(default=0.0)

    def __len__(self) -> int:
        return int(self.log_phi.shape[0])

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)

        def row(arr):
            return None if arr is None else arr[i]

        failed = int(self.failed_steps[i])
        return BridgePath(
            path_index=int(self.path_indices[i]),
            manifold_id=self.manifold_id,
            times=self.times,
            horizon=float(self.config.T),
            terminal_state=self.terminal_states[i],
            terminal_radial=float(self.terminal_radials[i]),
            log_phi=float(self.log_phi[i]),
            log_psi=float(self.log_psi[i]),
            cut_crossings=int(self.cut_crossings[i]),
            capped_steps=int(self.capped_steps[i]),
            local_time=float(self.local_time[i]),
            eta_accum=float(self.eta_accum[i]),
            log_phi_general=None if self.log_phi_general is None else float(self.log_phi_general[i]),
            log_psi_general=None if self.log_psi_general is None else float(self.log_psi_general[i]),
            expansion_remainder=None if self.expansion_remainder is None else float(self.expansion_remainder[i]),
            states=row(self.states),
            frames=row(self.frames),
            increments=row(self.increments),
            radials=row(self.radials),
            radial_drive=row(self.radial_drive),
            log_phi_partial=row(self.log_phi_partial),
            failed_step=None if failed < 0 else failed,
        )

    def __iter__(self) -> Iterator[BridgePath]:
        for i in range(len(self)):
            yield self[i]

    @property
    def steps(self) -> int:
        return int(self.times.shape[0])

    @property
    def ok(self) -> np.ndarray:
        return self.failed_steps < 0
