from typing import List

import click
import numpy as np
from rich.table import Table

from app.commands.common import bridge_errors, common_options, console, load_config, resolve_points
from app.core.exceptions import UsageError
from app.db.base import store
from app.models.bridge import BridgeConfig
from app.models.estimates import ProfileRow
from app.models.experiment import ExperimentConfig
from app.services.estimators import density_grid, density_profile, grid_mass
from app.services.manifolds import parse_point


PROFILE_COLUMNS = ["density", "std_error", "ess", "series", "reference", "euclidean", "low_confidence"]
GRID_COLUMNS = ["q1", "q2", "density", "std_error", "cell_weight", "reference"]


def _profile_rows(rows: List[ProfileRow]) -> list:
    return [
        [row.arc_length, *row.target, row.estimate.value, row.estimate.std_error, row.estimate.ess,
         row.series, row.estimate.reference, row.euclidean, row.estimate.low_confidence]
        for row in rows
    ]


def run_density(cfg: ExperimentConfig) -> dict:
    if cfg.paths < 1:
        raise UsageError("density needs --paths >= 1")
    manifold, start, target = resolve_points(cfg)
    targets = None
    if cfg.targets is not None:
        if not cfg.targets:
            raise UsageError("the target list is empty")
        targets = np.concatenate([parse_point(manifold, t) for t in cfg.targets], axis=0)

    outputs = {}
    for T in cfg.horizons:
        bridge_cfg = BridgeConfig(
            manifold_id=manifold.manifold_id,
            start=start,
            target=target,
            T=T,
            steps=cfg.steps,
            paths=cfg.paths,
            master_seed=cfg.seed,
            record="terminal",
            likelihood="bm",
        )
        if cfg.mode == "grid":
            rows = density_grid(bridge_cfg, cfg.resolution)
            mass = grid_mass(rows)
            store.write_csv(f"density_grid_T{T:g}.csv", GRID_COLUMNS, [[r[c] for c in GRID_COLUMNS] for r in rows])
            outputs[f"{T:g}"] = {"cells": len(rows), "mass": mass}
            console.print(f"T={T:g}: {len(rows)} cells, grid mass {mass:.4f}")
            continue

        end = None if targets is not None else parse_point(manifold, cfg.target)
        rows = density_profile(bridge_cfg, targets=targets, end=end, points=cfg.points, l_max=cfg.l_max)
        header = ["arc_length"] + [f"x{i}" for i in range(manifold.public_size)] + PROFILE_COLUMNS
        store.write_csv(f"density_profile_T{T:g}.csv", header, _profile_rows(rows))
        outputs[f"{T:g}"] = {"points": len(rows), "low_confidence": sum(r.estimate.low_confidence for r in rows)}

        table = Table(title=f"Heat kernel on {manifold.manifold_id}, T={T:g}")
        for column in ("arc", "estimate", "std error", "reference", "euclidean"):
            table.add_column(column, justify="right")
        for row in rows:
            ref = row.estimate.reference
            table.add_row(
                f"{row.arc_length:.3f}",
                f"{row.estimate.value:.5g}",
                f"{row.estimate.std_error:.2g}",
                "-" if ref is None else f"{ref:.5g}",
                f"{row.euclidean:.5g}",
            )
        console.print(table)

    summary = {"manifold_id": manifold.manifold_id, "mode": cfg.mode, "paths": cfg.paths, "steps": cfg.steps,
               "seed": cfg.seed, "horizons": outputs}
    store.write_json("density_summary.json", summary)
    return summary


@click.command("density")
@common_options
@click.option("--mode", type=click.Choice(["profile", "grid"]), default=None)
@click.option("--times", default=None, help="Comma separated horizons, e.g. 0.5,1,2")
@click.option("--targets", default=None, help="Semicolon separated profile targets")
@click.option("--points", type=int, default=None, help="Profile points along the geodesic")
@click.option("--resolution", type=int, default=None, help="Grid cells per chart axis")
@click.option("--l-max", "l_max", type=int, default=None, help="Series truncation")
@bridge_errors
def density_command(**flags):
    """Estimate transition densities along a geodesic or over a chart grid."""
    run_density(load_config("density", flags))
