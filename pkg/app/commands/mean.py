import click
from rich.panel import Panel

from app.commands.common import bridge_errors, common_options, console, load_config
from app.core.exceptions import UsageError
from app.db.base import store
from app.db.datasets import load_points
from app.models.experiment import ExperimentConfig
from app.services.estimators import diffusion_mean
from app.services.manifolds import get_manifold, parse_point, point_model


def run_mean(cfg: ExperimentConfig, start_given: bool = False):
    if not cfg.data:
        raise UsageError("mean needs a data file (--data)")
    data = load_points(cfg.data, cfg.manifold)
    initial = None
    if start_given:
        manifold = get_manifold(data[0].manifold_id)
        initial = point_model(manifold, parse_point(manifold, cfg.start))

    estimate = diffusion_mean(
        data,
        cfg.T,
        initial=initial,
        steps=cfg.mean_steps,
        paths_per_datum=cfg.paths_per_datum,
        max_iters=cfg.max_iters,
        tol=cfg.tol,
        seed=cfg.seed,
    )
    store.write_json("mean.json", estimate)
    width = len(estimate.iterates[0].coords)
    header = ["iteration"] + [f"x{i}" for i in range(width)] + ["log_likelihood", "gradient_norm", "step_size"]
    rows = [
        [i, *point.coords, estimate.log_likelihoods[i], estimate.gradient_norms[i], estimate.step_sizes[i]]
        for i, point in enumerate(estimate.iterates)
    ]
    store.write_csv("mean_trace.csv", header, rows)

    final = ", ".join(f"{c:.5f}" for c in estimate.iterates[-1].coords)
    status = "[green]converged[/green]" if estimate.converged else "[yellow]not converged[/yellow]"
    console.print(Panel(
        f"Mean: ({final})\nIterations: {estimate.iterations} ({status})\n"
        f"Log likelihood: {estimate.log_likelihoods[-1]:.6g}",
        title=f"Diffusion mean, T={cfg.T:g}",
    ))
    return estimate


@click.command("mean")
@common_options
@click.option("--data", default=None, help="JSON or CSV file of data points")
@click.option("--max-iters", type=int, default=None)
@click.option("--tol", type=float, default=None, help="Gradient norm tolerance")
@click.option(
    "--paths-per-datum",
    type=int,
    default=None,
    help="Bridges per observation and likelihood evaluation "
    "(default MEAN_PATHS_PER_DATUM = 4; 1 gives a single bridge per observation)",
)
@click.option("--mean-steps", type=int, default=None, help="Grid size of the likelihood bridges")
@bridge_errors
def mean_command(**flags):
    """Estimate the diffusion mean of a data file by likelihood ascent.

    --start sets the initial guess; the projected extrinsic mean is used otherwise.
    """
    start_given = flags.get("start") is not None
    run_mean(load_config("mean", flags), start_given=start_given)
