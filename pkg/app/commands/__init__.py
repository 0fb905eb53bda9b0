"""Command package, one click command per subcommand."""

from .bridge import bridge_command
from .check import check_command
from .density import density_command
from .mean import mean_command
from .sample import sample_command

__all__ = ["bridge_command", "check_command", "density_command", "mean_command", "sample_command"]
