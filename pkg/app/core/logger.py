import logging
import sys
from pathlib import Path
from typing import Any, Dict, Optional
import json

from loguru import logger

from app.core.config import settings


class InterceptHandler(logging.Handler):
    def emit(self, record: logging.LogRecord) -> None:
        try:
            level = logger.level(record.levelname).name
        except ValueError:
            level = record.levelno

        frame, depth = logging.currentframe(), 2
        while frame is not None and frame.f_code.co_filename == logging.__file__:
            frame = frame.f_back
            depth += 1

        logger.opt(depth=depth, exception=record.exc_info).log(
            level, record.getMessage()
        )


def setup_logging(
    *,
    log_path: Optional[Path] = None,
    level: Optional[str] = None,
    retention: str = "1 week",
    rotation: str = "50 MB",
    format: str = "<green>{time:YYYY-MM-DD HH:mm:ss.SSS}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>",
) -> None:
    """Configure logging for the command line runs.

    Console output goes to stderr so that stdout stays free for data a caller
    may pipe; the file sink keeps a rotating history under ``logs/``.
    """
    log_path = log_path or settings.log_path
    level = level or settings.LOG_LEVEL
    log_path.mkdir(parents=True, exist_ok=True)

    # Remove all existing handlers
    logging.root.handlers = []

    logger.configure(
        handlers=[
            {
                "sink": sys.stderr,
                "level": level,
                "format": format,
            },
            {
                "sink": log_path / "app.log",
                "level": level,
                "format": format,
                "rotation": rotation,
                "retention": retention,
            },
        ]
    )

    # Intercept standard logging (scipy and numpy warnings routed through it)
    logging.basicConfig(handlers=[InterceptHandler()], level=0, force=True)
    logging.captureWarnings(True)

    logger.debug("Logging configured successfully")


def log_config(effective: Dict[str, Any], origins: Dict[str, str]) -> None:
    """Log the effective run configuration and where each value came from."""
    log_data = {
        "config": effective,
        "origins": origins,
    }
    logger.info(f"Config: {json.dumps(log_data, default=str, sort_keys=True)}")


def log_ensemble_run(
    manifold_id: str,
    paths: int,
    steps: int,
    duration_ms: Optional[float] = None,
    guided: bool = True,
    failures: int = 0,
    cut_crossings: Optional[int] = None,
    capped_steps: Optional[int] = None,
) -> None:
    """Log an ensemble simulation."""
    log_data = {
        "manifold": manifold_id,
        "paths": paths,
        "steps": steps,
        "guided": guided,
        "duration_ms": duration_ms,
    }

    if failures:
        log_data["failures"] = failures
    if cut_crossings:
        log_data["cut_crossings"] = cut_crossings
    if capped_steps:
        log_data["capped_steps"] = capped_steps

    logger.info(f"Ensemble: {json.dumps(log_data)}")


def log_estimate(
    kind: str,
    value: float,
    std_error: Optional[float] = None,
    ess: Optional[float] = None,
    paths: Optional[int] = None,
    low_confidence: bool = False,
) -> None:
    """Log a Monte Carlo estimate."""
    log_data = {
        "kind": kind,
        "value": value,
    }

    if std_error is not None:
        log_data["std_error"] = std_error
    if ess is not None:
        log_data["ess"] = ess
    if paths is not None:
        log_data["paths"] = paths

    if low_confidence:
        log_data["low_confidence"] = True
        logger.warning(f"⚠️ Estimate: {json.dumps(log_data)}")
        return

    logger.info(f"Estimate: {json.dumps(log_data)}")


def log_suite_result(
    suite: str,
    passed: bool,
    duration_ms: Optional[float] = None,
    error: Optional[str] = None,
) -> None:
    """Log a diagnostic suite outcome."""
    log_data = {
        "suite": suite,
        "passed": passed,
        "duration_ms": duration_ms,
    }

    if error:
        log_data["error"] = error

    if passed:
        logger.info(f"✅ Check: {json.dumps(log_data)}")
    else:
        logger.error(f"❌ Check: {json.dumps(log_data)}")


def log_file_write(
    path: str,
    kind: str,
    rows: Optional[int] = None,
    error: Optional[str] = None,
) -> None:
    """Log result store writes."""
    log_data = {
        "path": path,
        "kind": kind,
    }

    if rows is not None:
        log_data["rows"] = rows
    if error:
        log_data["error"] = error
        logger.error(f"❌ Write: {json.dumps(log_data)}")
        return

    logger.info(f"Write: {json.dumps(log_data)}")
