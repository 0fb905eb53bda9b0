import click
import numpy as np
from rich.table import Table

from app.commands.common import bridge_errors, common_options, console, load_config, resolve_points
from app.core.exceptions import UsageError
from app.db.base import store
from app.models.bridge import BridgeConfig, BridgeEnsemble
from app.models.experiment import ExperimentConfig
from app.services.likelihood import likelihood_summary
from app.services.manifolds import get_manifold
from app.services.sde_engine import sample_ensemble


def _stats(values: np.ndarray) -> dict:
    return {
        "mean": float(np.mean(values)),
        "std": float(np.std(values)),
        "min": float(np.min(values)),
        "median": float(np.median(values)),
        "max": float(np.max(values)),
    }


def ensemble_summary(ensemble: BridgeEnsemble) -> dict:
    manifold = get_manifold(ensemble.manifold_id)
    return {
        "manifold_id": ensemble.manifold_id,
        "T": ensemble.config.T,
        "steps": ensemble.steps,
        "paths": len(ensemble),
        "master_seed": ensemble.config.master_seed,
        "guided": ensemble.config.guided,
        "duration_ms": ensemble.duration_ms,
        "terminal_radial": _stats(ensemble.terminal_radials),
        "log_phi": _stats(ensemble.log_phi),
        "cut_crossings": int(ensemble.cut_crossings.sum()),
        "capped_steps": int(ensemble.capped_steps.sum()),
        "local_time": float(ensemble.local_time.mean()),
        "per_path": [
            {
                "path_index": path.path_index,
                "terminal": manifold.to_public(path.terminal_state[None])[0].tolist(),
                "terminal_radial": path.terminal_radial,
                **likelihood_summary(path).model_dump(),
            }
            for path in ensemble
        ],
    }


def write_paths(ensemble: BridgeEnsemble) -> int:
    """One CSV per path: time, public coordinates, radial, partial log phi."""
    if ensemble.radials is None:
        return 0
    manifold = get_manifold(ensemble.manifold_id)
    width = manifold.public_size
    header = ["time"]
    if ensemble.states is not None:
        header += [f"coord_{i}" for i in range(width)]
    header += ["radial", "log_phi_partial"]
    for path in ensemble:
        coords = manifold.to_public(path.states) if path.states is not None else None
        rows = []
        for k, t in enumerate(ensemble.times):
            row = [t]
            if coords is not None:
                row += coords[k].tolist()
            row += [path.radials[k], path.log_phi_partial[k]]
            rows.append(row)
        store.write_csv(f"path_{path.path_index:04d}.csv", header, rows)
    return len(ensemble)


def run_bridge(cfg: ExperimentConfig) -> dict:
    if cfg.paths < 1:
        raise UsageError("bridge needs --paths >= 1")
    manifold, start, target = resolve_points(cfg)
    bridge_cfg = BridgeConfig(
        manifold_id=manifold.manifold_id,
        start=start,
        target=target,
        T=cfg.T,
        steps=cfg.steps,
        paths=cfg.paths,
        master_seed=cfg.seed,
        guided=cfg.guided,
        drift_cap=cfg.drift_cap,
        record=cfg.record,
        likelihood=cfg.likelihood,
        time_grid=cfg.time_grid,
    )
    ensemble = sample_ensemble(bridge_cfg)
    summary = ensemble_summary(ensemble)
    write_paths(ensemble)
    store.write_json("bridge_summary.json", summary)

    table = Table(title=f"Bridges on {manifold.manifold_id}")
    table.add_column("Quantity", style="cyan")
    for column in ("mean", "median", "max"):
        table.add_column(column, justify="right")
    for key in ("terminal_radial", "log_phi"):
        table.add_row(key, *(f"{summary[key][c]:.4g}" for c in ("mean", "median", "max")))
    console.print(table)
    console.print(f"Cut crossings: {summary['cut_crossings']}, capped steps: {summary['capped_steps']}")
    return summary


@click.command("bridge")
@common_options
@click.option("--likelihood", type=click.Choice(["auto", "bm", "general", "both", "none"]), default=None)
@click.option("--record", type=click.Choice(["full", "summary", "terminal"]), default=None)
@click.option("--time-grid", type=click.Choice(["uniform", "geometric"]), default=None)
@click.option("--drift-cap", type=float, default=None, help="Cap on the guiding drift norm")
@click.option("--unguided", "guided", flag_value=False, default=None, help="Simulate without the guiding drift")
@bridge_errors
def bridge_command(**flags):
    """Simulate guided bridges and write per-path CSVs plus a summary."""
    run_bridge(load_config("bridge", flags))
