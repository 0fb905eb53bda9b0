import sys
from typing import List, Optional

import click
from loguru import logger

from app.commands import bridge_command, check_command, density_command, mean_command, sample_command
from app.core.config import settings
from app.core.exceptions import EXIT_USAGE, BridgeError
from app.core.logger import setup_logging


@click.group()
@click.option("--log-level", default=None, help="Override LOG_LEVEL for this run")
@click.version_option("1.0.0", prog_name="manifold-bridges")
def cli(log_level: Optional[str]):
    """Guided diffusion bridges on Riemannian manifolds."""
    setup_logging(level=log_level or settings.LOG_LEVEL)
    logger.info("Starting manifold-bridges")


cli.add_command(bridge_command)
cli.add_command(density_command)
cli.add_command(mean_command)
cli.add_command(sample_command)
cli.add_command(check_command)


def main(argv: Optional[List[str]] = None) -> int:
    """Process entry point with the documented exit codes (click usage errors map to 1)."""
    try:
        cli.main(args=argv, prog_name="manifold-bridges", standalone_mode=False)
    except click.exceptions.Abort:
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except BridgeError as e:
        logger.error(f"❌ {type(e).__name__}: {e.detail}")
        return e.exit_code
    except SystemExit as e:
        return int(e.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
