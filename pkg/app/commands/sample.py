import click

from app.commands.common import bridge_errors, common_options, console, load_config, resolve_points
from app.core.exceptions import UsageError
from app.db.datasets import save_points
from app.models.bridge import BridgeConfig
from app.models.experiment import ExperimentConfig
from app.services.sde_engine import sample_endpoints


def run_sample(cfg: ExperimentConfig, name: str = "samples.json"):
    if cfg.paths < 1:
        raise UsageError("sample needs --paths >= 1")
    manifold, start, _ = resolve_points(cfg)
    bridge_cfg = BridgeConfig(
        manifold_id=manifold.manifold_id,
        start=start,
        target=start,
        T=cfg.T,
        steps=cfg.steps,
        paths=cfg.paths,
        master_seed=cfg.seed,
    )
    points = sample_endpoints(bridge_cfg)
    path = save_points(name, manifold, points)
    console.print(f"✅ Wrote {points.shape[0]} endpoint(s) on {manifold.manifold_id} to {path}")
    return points


@click.command("sample")
@common_options
@click.option("--name", default="samples.json", help="Output file name (.json or .csv) inside --out")
@bridge_errors
def sample_command(name, **flags):
    """Sample endpoints of unconditioned Brownian motion started at --start."""
    run_sample(load_config("sample", flags), name)
