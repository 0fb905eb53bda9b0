from pydantic_settings import BaseSettings
from typing import List
import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


class Settings(BaseSettings):
    # Geometry
    EPS_CUT: float = float(os.getenv("EPS_CUT", "1e-6"))
    FRAME_TOL: float = float(os.getenv("FRAME_TOL", "1e-8"))

    # Surface backend
    SURFACE_STEP: float = float(os.getenv("SURFACE_STEP", "0.01"))
    SURFACE_JACOBI_STEPS: int = int(os.getenv("SURFACE_JACOBI_STEPS", "200"))
    SURFACE_NEWTON_TOL: float = float(os.getenv("SURFACE_NEWTON_TOL", "1e-10"))
    SURFACE_NEWTON_MAX_ITERS: int = int(os.getenv("SURFACE_NEWTON_MAX_ITERS", "40"))
    SURFACE_RECHECK_EVERY: int = int(os.getenv("SURFACE_RECHECK_EVERY", "25"))
    SURFACE_RECHECK_MARGIN: float = float(os.getenv("SURFACE_RECHECK_MARGIN", "0.25"))
    GEODESIC_CACHE_GRID: float = float(os.getenv("GEODESIC_CACHE_GRID", "1e-3"))
    GEODESIC_CACHE_MAX_ENTRIES: int = int(os.getenv("GEODESIC_CACHE_MAX_ENTRIES", "200000"))

    # SDE engine
    CHUNK_SIZE: int = int(os.getenv("CHUNK_SIZE", "512"))
    WORKERS: int = int(os.getenv("WORKERS", str(min(4, os.cpu_count() or 1))))
    DEFAULT_T: float = float(os.getenv("DEFAULT_T", "1.0"))
    DEFAULT_STEPS: int = int(os.getenv("DEFAULT_STEPS", "1000"))
    DEFAULT_PATHS: int = int(os.getenv("DEFAULT_PATHS", "200"))
    DEFAULT_SEED: int = int(os.getenv("DEFAULT_SEED", "20240601"))
    SIGMA_COND_MAX: float = float(os.getenv("SIGMA_COND_MAX", "1e6"))

    # Estimators
    SERIES_L_MAX: int = int(os.getenv("SERIES_L_MAX", "16"))
    ESS_FLOOR: float = float(os.getenv("ESS_FLOOR", "0.01"))
    MEAN_CHART_STEP: float = float(os.getenv("MEAN_CHART_STEP", "1e-3"))
    MEAN_MAX_ITERS: int = int(os.getenv("MEAN_MAX_ITERS", "50"))
    MEAN_TOL: float = float(os.getenv("MEAN_TOL", "0.05"))
    MEAN_PATHS_PER_DATUM: int = int(os.getenv("MEAN_PATHS_PER_DATUM", "4"))
    MEAN_STEPS: int = int(os.getenv("MEAN_STEPS", "100"))
    PROFILE_POINTS: int = int(os.getenv("PROFILE_POINTS", "20"))
    GRID_RESOLUTION: int = int(os.getenv("GRID_RESOLUTION", "16"))

    # Output and logging
    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "results")
    LOG_DIR: str = os.getenv("LOG_DIR", "logs")
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Manifolds run by the endpoint-convergence suite
    CHECK_MANIFOLDS: List[str] = ["sphere2", "cylinder", "flat-torus", "so3"]
    CHECK_SURFACES: List[str] = ["ellipsoid:1,1.2,0.8"]


    @property
    def log_path(self) -> Path:
        """Directory holding the rotating application log."""
        return Path(self.LOG_DIR)

    class Config:
        env_file = ".env"
        extra = "ignore"  # Ignore extra fields that don't match our schema


# Create settings instance
settings = Settings()
