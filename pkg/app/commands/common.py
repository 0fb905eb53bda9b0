import functools
import sys
from typing import Any, Callable, Dict, Tuple

import click
from loguru import logger
from rich.console import Console

from app.core.exceptions import BridgeError
from app.core.logger import log_config
from app.db.base import store
from app.models.experiment import ExperimentConfig
from app.services.manifolds import Manifold, get_manifold, parse_point


console = Console()
err_console = Console(stderr=True)


def common_options(func: Callable) -> Callable:
    """Flags shared by every subcommand; None means 'not given on the command line'."""
    options = [
        click.option("--manifold", default=None, help="Manifold or surface id (sphere2, cylinder, flat-torus, so3, torus:R,rho, ellipsoid:a,b,c)"),
        click.option("--start", default=None, help="Start point: coordinates or a name such as north, identity, rotvec:a,b,c"),
        click.option("--target", default=None, help="Target point"),
        click.option("--T", "T", type=float, default=None, help="Horizon"),
        click.option("--steps", type=int, default=None, help="Grid size N"),
        click.option("--paths", type=int, default=None, help="Ensemble size M"),
        click.option("--seed", type=int, default=None, help="Master seed"),
        click.option("--out", default=None, help="Output directory"),
        click.option("--config", "config_file", type=click.Path(dir_okay=False), default=None, help="key=value or YAML config file"),
    ]
    for option in reversed(options):
        func = option(func)
    return func


def bridge_errors(func: Callable) -> Callable:
    """Report library errors and exit with their documented code."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except BridgeError as e:
            logger.error(f"❌ {type(e).__name__}: {e.detail}")
            err_console.print(f"[red]{type(e).__name__}:[/red] {e.detail}")
            sys.exit(e.exit_code)

    return wrapper


def load_config(command: str, flags: Dict[str, Any]) -> ExperimentConfig:
    config_file = flags.pop("config_file", None)
    cfg, origins = ExperimentConfig.from_sources(command, flags, config_file)
    effective = cfg.model_dump()
    log_config(effective, {k: v for k, v in origins.items() if v != "default"})
    store.set_root(cfg.out)
    store.reset()
    return cfg


def resolve_points(cfg: ExperimentConfig) -> Tuple[Manifold, list, list]:
    """Manifold plus public coordinates of the configured start and target."""
    manifold = get_manifold(cfg.manifold)
    start = manifold.to_public(parse_point(manifold, cfg.start))[0].tolist()
    target = manifold.to_public(parse_point(manifold, cfg.target))[0].tolist()
    return manifold, start, target
