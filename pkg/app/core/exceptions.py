"""Error hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI reports for it, the same
way route handlers attach a status code to the errors they raise.
"""

from typing import Any, Dict, List, Optional


EXIT_USAGE = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3
EXIT_CHECK_FAILED = 4


class BridgeError(Exception):
    exit_code: int = EXIT_NUMERICAL

    def __init__(self, detail: str, **context: Any):
        super().__init__(detail)
        self.detail = detail
        self.context: Dict[str, Any] = context

    def to_dict(self) -> Dict[str, Any]:
        return {"error": type(self).__name__, "detail": self.detail, **self.context}


class UsageError(BridgeError):
    """Invalid ids, mismatched manifolds, malformed configs."""

    exit_code = EXIT_USAGE


class NumericalError(BridgeError):
    exit_code = EXIT_NUMERICAL


class CutLocusError(NumericalError):
    """A radial quantity was requested at or beyond the cut locus."""


class ConjugatePointError(NumericalError):
    pass


class DegenerateMetricError(NumericalError):
    pass


class GeodesicConvergenceError(NumericalError):
    def __init__(self, detail: str, residuals: Optional[List[float]] = None, **context: Any):
        super().__init__(detail, residuals=residuals or [], **context)
        self.residuals = residuals or []


class DriverError(NumericalError):
    pass


class PathError(NumericalError):
    def __init__(self, detail: str, path_index: int, step: int, **context: Any):
        super().__init__(detail, path_index=path_index, step=step, **context)
        self.path_index = path_index
        self.step = step


class LikelihoodError(NumericalError):
    def __init__(self, detail: str, step: int, **context: Any):
        super().__init__(detail, step=step, **context)
        self.step = step


class DegenerateWeightsError(NumericalError):
    pass


class EstimationError(NumericalError):
    pass


class EnsembleError(NumericalError):
    """Aggregates the per-path failures of one ensemble run."""

    def __init__(self, failures: List[PathError], ensemble: Any = None):
        indices = [f.path_index for f in failures]
        super().__init__(
            f"{len(failures)} path(s) failed",
            failures=[f.to_dict() for f in failures],
        )
        self.failures = failures
        self.failed_indices = indices
        self.ensemble = ensemble


class DataFileError(BridgeError):
    exit_code = EXIT_IO


class CheckFailure(BridgeError):
    exit_code = EXIT_CHECK_FAILED
