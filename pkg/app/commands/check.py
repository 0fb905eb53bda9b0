import click
from rich.table import Table

from app.commands.common import bridge_errors, common_options, console, load_config
from app.core.exceptions import CheckFailure
from app.db.base import store
from app.models.estimates import CheckReport
from app.models.experiment import ExperimentConfig
from app.services.diagnostics import run_checks


def run_check(cfg: ExperimentConfig) -> CheckReport:
    report = run_checks(
        scale=cfg.scale,
        seed=cfg.seed,
        suites=cfg.suites,
        include_surfaces=cfg.include_surfaces,
        drift_sign=cfg.drift_sign,
    )
    store.write_json("check_report.json", report)

    table = Table(title=f"Self-checks ({report.scale})")
    table.add_column("Suite", style="cyan")
    table.add_column("Result")
    table.add_column("Time (s)", justify="right")
    for suite in report.suites:
        mark = "[green]pass[/green]" if suite.passed else "[red]FAIL[/red]"
        table.add_row(suite.name, mark if not suite.error else f"{mark} {suite.error}", f"{suite.duration_ms / 1000:.1f}")
    console.print(table)

    if not report.passed:
        failed = [s.name for s in report.suites if not s.passed]
        raise CheckFailure(f"suite(s) failed: {', '.join(failed)}", failed=failed)
    return report


@click.command("check")
@common_options
@click.option("--scale", type=click.Choice(["quick", "acceptance"]), default=None)
@click.option("--suite", "suites", default=None, help="Comma separated subset of suites")
@click.option("--include-surfaces", is_flag=True, default=None, help="Add surfaces to the endpoint suite")
@click.option("--inject-drift-sign-error", is_flag=True, default=False, hidden=True)
@bridge_errors
def check_command(inject_drift_sign_error, **flags):
    """Run the self-check suites; exits with code 4 when any suite fails."""
    if inject_drift_sign_error:
        flags["drift_sign"] = -1.0
    run_check(load_config("check", flags))
