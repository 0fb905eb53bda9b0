from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator

from app.core.config import settings
from app.core.exceptions import DataFileError, UsageError
from app.utils.formatting import parse_floats


Command = Literal["bridge", "density", "mean", "sample", "check"]


class ExperimentConfig(BaseModel):
    """Effective configuration of one command run.

    Values are layered as command-line flag > config file > built-in default.
    """

    command: Command
    manifold: str = Field(default="sphere2", description="Manifold or surface id")
    start: str = Field(default="north", description="Start point, coordinates or a symbolic name")
    target: str = Field(default="south", description="Target point, coordinates or a symbolic name")
    T: float = Field(default=settings.DEFAULT_T, gt=0.0)
    steps: int = Field(default=settings.DEFAULT_STEPS, ge=2)
    paths: int = Field(default=settings.DEFAULT_PATHS, ge=0)
    seed: int = Field(default=settings.DEFAULT_SEED)
    out: str = Field(default=settings.OUTPUT_DIR, description="Output directory")

    # bridge
    likelihood: str = Field(default="auto")
    record: str = Field(default="full")
    time_grid: str = Field(default="uniform")
    drift_cap: Optional[float] = Field(default=None, gt=0.0)
    guided: bool = True

    # density
    mode: Literal["profile", "grid"] = "profile"
    times: Optional[List[float]] = Field(default=None, description="Horizons for the density command, defaults to [T]")
    targets: Optional[List[str]] = Field(default=None, description="Explicit profile targets, ';' separated on the command line")
    points: int = Field(default=settings.PROFILE_POINTS, ge=1)
    resolution: int = Field(default=settings.GRID_RESOLUTION, ge=2)
    l_max: int = Field(default=settings.SERIES_L_MAX, ge=0)

    # mean
    data: Optional[str] = None
    max_iters: int = Field(default=settings.MEAN_MAX_ITERS, ge=0)
    tol: float = Field(default=settings.MEAN_TOL, gt=0.0)
    paths_per_datum: int = Field(default=settings.MEAN_PATHS_PER_DATUM, ge=1)
    mean_steps: int = Field(default=settings.MEAN_STEPS, ge=2)

    # check
    scale: Literal["quick", "acceptance"] = "quick"
    suites: Optional[List[str]] = None
    include_surfaces: bool = False
    drift_sign: float = 1.0

    @field_validator("times", mode="before")
    @classmethod
    def split_times(cls, v: Any) -> Any:
        if isinstance(v, str):
            return parse_floats(v)
        return v

    @field_validator("targets", mode="before")
    @classmethod
    def split_targets(cls, v: Any) -> Any:
        # points contain commas themselves
        if isinstance(v, str):
            return [item.strip() for item in v.split(";") if item.strip()]
        return v

    @field_validator("suites", mode="before")
    @classmethod
    def split_suites(cls, v: Any) -> Any:
        if isinstance(v, str):
            return [item.strip() for item in v.split(",") if item.strip()]
        return v

    @field_validator("times")
    @classmethod
    def positive_times(cls, v: Optional[List[float]]) -> Optional[List[float]]:
        if v is not None and any(t <= 0.0 for t in v):
            raise ValueError("horizons must be positive")
        return v

    @property
    def horizons(self) -> List[float]:
        return list(self.times) if self.times else [self.T]

    @classmethod
    def from_sources(
        cls,
        command: str,
        flags: Dict[str, Any],
        config_file: Optional[Union[str, Path]] = None,
    ) -> Tuple["ExperimentConfig", Dict[str, str]]:
        """Merge flags over the config file over defaults; returns the config and each key's origin."""
        file_values = read_config_file(config_file) if config_file else {}
        known = set(cls.model_fields) - {"command"}
        unknown = sorted(set(file_values) - known)
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")

        merged: Dict[str, Any] = {}
        origins: Dict[str, str] = {}
        for key, value in file_values.items():
            merged[key] = value
            origins[key] = "file"
        for key, value in flags.items():
            if value is None or key not in known:
                continue
            merged[key] = value
            origins[key] = "flag"
        try:
            cfg = cls(command=command, **merged)
        except ValidationError as e:
            first = e.errors()[0]
            where = ".".join(str(p) for p in first.get("loc", ()))
            raise UsageError(f"invalid configuration value for '{where}': {first.get('msg')}")
        for key in known - set(origins):
            origins[key] = "default"
        return cfg, origins


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """Read ``key=value`` lines (``#`` comments) or a YAML mapping when the suffix is .yaml/.yml."""
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise DataFileError(f"could not read config file {p}: {e}", path=str(p))

    if p.suffix.lower() in (".yaml", ".yml"):
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise DataFileError(f"malformed YAML in {p}: {e}", path=str(p))
        if not isinstance(doc, dict):
            raise DataFileError(f"{p} must hold a mapping", path=str(p))
        return {str(k).replace("-", "_"): v for k, v in doc.items()}

    values: Dict[str, Any] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise DataFileError(f"{p}:{number}: expected key=value", path=str(p), line=number)
        key, value = stripped.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values
