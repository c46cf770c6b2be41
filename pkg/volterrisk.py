#!/usr/bin/env python3
"""Volterrisk CLI - backward stochastic Volterra equations with jumps.

Workflow commands (each takes a scenario YAML file):
  solve           General BSVIE solver (surface CSV + convergence JSON)
  solve-linear    Closed-form linear BSVIE via resolvent and measure change
  kernel          Resolvent table of a deterministic kernel
  risk            Dynamic risk measure rho(t; psi) per node
  axioms          Risk-measure axiom suite
  compare         Comparison-theorem hypotheses and ordering
  semimartingale  Type 1/2/3 constructions and decomposition check
  oracle          Nested Monte Carlo Y(0) on a tiny grid
  simulate        Dump simulated paths as CSV

Admin commands:
  init-db         Initialize the run history database
  history         List recent runs

Exit codes: 0 success, 2 a verdict failed, 1 any error.
"""

import logging
import sys
from pathlib import Path

import click

from app.config import settings

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_VERDICT = 2

BANNER = r"""
 __     __    _ _                 _     _
 \ \   / /__ | | |_ ___ _ __ _ __(_)___| | __
  \ \ / / _ \| | __/ _ \ '__| '__| / __| |/ /
   \ V / (_) | | ||  __/ |  | |  | \__ \   <
    \_/ \___/|_|\__\___|_|  |_|  |_|___/_|\_\
 =============================================
      "Every risk has a past. Ours skips it."
"""

logger = logging.getLogger("volterrisk")


@click.group(invoke_without_command=True)
@click.option("--log-level", default=None, help="Override VOLTERRISK_LOG_LEVEL")
@click.pass_context
def cli(ctx, log_level):
    """Volterrisk - BSVIE solver and verification harness."""
    logging.basicConfig(
        level=(log_level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if ctx.invoked_subcommand is None:
        click.echo(BANNER)
        click.echo("Use --help for available commands.")


def workflow_options(fn):
    fn = click.option("--threads", type=int, default=None, help="Worker cap (default VOLTERRISK_THREADS)")(fn)
    fn = click.option("--out", type=click.Path(file_okay=False), default=None,
                      help="Output directory (default VOLTERRISK_OUTPUT_DIR)")(fn)
    fn = click.option("--paths", type=int, default=None, help="Override mc.n_paths")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override mc.seed")(fn)
    fn = click.argument("config", type=click.Path(dir_okay=False))(fn)
    return fn


def _execute(command, config, seed, paths, out, threads, sections=None) -> int:
    """Load, run, report. Returns the process exit code."""
    from app.exceptions import DivergenceError, ScenarioError, VolterriskError
    from app.services.artifacts import ArtifactWriter
    from app.services.run_history import RunLedger
    from app.services.scenario_loader import load_scenario
    from app.services.workflows import RunContext, run_workflow

    ledger = RunLedger(settings.record_history)
    click.echo(f"[{command.upper()}] {config}")
    try:
        loaded = load_scenario(config, command=command, seed=seed, paths=paths, out=out, sections=sections)
        out_dir = Path(loaded.config.outputs.dir or settings.output_dir)
        writer = ArtifactWriter(out_dir, command, loaded.config_hash, loaded.seed)
        ledger.start(command, loaded.config_hash, loaded.seed, str(out_dir))
        result = run_workflow(command, RunContext(loaded, writer, threads))
    except ScenarioError as e:
        click.echo(click.style("[ERROR] ", fg="red") + "Invalid scenario:", err=True)
        for problem in e.problems:
            click.echo(f"  - {problem}", err=True)
        ledger.finish(EXIT_ERROR, str(e))
        return EXIT_ERROR
    except DivergenceError as e:
        click.echo(click.style("[ERROR] ", fg="red") + str(e), err=True)
        click.echo("  Picard history: " + ", ".join(f"{h:.3e}" for h in e.history), err=True)
        ledger.finish(EXIT_ERROR, str(e))
        return EXIT_ERROR
    except (VolterriskError, ValueError, OSError) as e:
        click.echo(click.style("[ERROR] ", fg="red") + str(e), err=True)
        ledger.finish(EXIT_ERROR, str(e))
        return EXIT_ERROR
    except Exception as e:
        logger.exception(f"{command} failed unexpectedly")
        ledger.finish(EXIT_ERROR, f"{type(e).__name__}: {e}")
        return EXIT_ERROR

    for line in result.summary:
        click.echo(f"  {line}")
    for path in result.artifacts:
        click.echo(f"  -> {path}")
    if not result.passed:
        click.echo(click.style("[VERDICT FAILURE]", fg="yellow") + " At least one check failed.")
        ledger.finish(EXIT_VERDICT)
        return EXIT_VERDICT
    click.echo(click.style("[OK]", fg="green") + f" {command} finished (hash {loaded.config_hash[:12]}).")
    ledger.finish(EXIT_OK)
    return EXIT_OK


# ===== Workflow Commands =====

@cli.command()
@workflow_options
def solve(config, seed, paths, out, threads):
    """Solve a BSVIE with jumps by regression sweeps and Picard iteration."""
    sys.exit(_execute("solve", config, seed, paths, out, threads))


@cli.command("solve-linear")
@workflow_options
def solve_linear(config, seed, paths, out, threads):
    """Evaluate a linear BSVIE by its closed form."""
    sys.exit(_execute("solve-linear", config, seed, paths, out, threads))


@cli.command()
@workflow_options
def kernel(config, seed, paths, out, threads):
    """Tabulate the resolvent of a deterministic kernel."""
    sys.exit(_execute("kernel", config, seed, paths, out, threads))


@cli.command()
@workflow_options
def risk(config, seed, paths, out, threads):
    """Compute rho(t; psi) at every node."""
    sys.exit(_execute("risk", config, seed, paths, out, threads))


@cli.command()
@workflow_options
def axioms(config, seed, paths, out, threads):
    """Check convexity, monotonicity, translation invariance and past independence."""
    sys.exit(_execute("axioms", config, seed, paths, out, threads))


@cli.command()
@workflow_options
def compare(config, seed, paths, out, threads):
    """Check comparison hypotheses and the ordering of two solutions."""
    sys.exit(_execute("compare", config, seed, paths, out, threads))


@cli.command()
@workflow_options
@click.option("--type", "kind", type=click.IntRange(1, 3), default=None, help="Override semimartingale.type")
def semimartingale(config, seed, paths, out, threads, kind):
    """Run a Type 1/2/3 construction against the general solver."""
    sections = {"semimartingale": {"type": kind}} if kind is not None else None
    sys.exit(_execute("semimartingale", config, seed, paths, out, threads, sections))


@cli.command()
@workflow_options
def oracle(config, seed, paths, out, threads):
    """Brute-force Y(0) by nested simulation."""
    sys.exit(_execute("oracle", config, seed, paths, out, threads))


@cli.command()
@workflow_options
def simulate(config, seed, paths, out, threads):
    """Simulate the path bundle and dump it as CSV."""
    sys.exit(_execute("simulate", config, seed, paths, out, threads))


# ===== Admin Commands =====

@cli.command()
def init_db():
    """Initialize the run history database (create all tables)."""
    click.echo(BANNER)
    from app.database import init_db as create_tables

    create_tables()
    click.echo("[OK] Database initialized successfully.")


@cli.command()
@click.option("--limit", default=20, show_default=True, help="Number of runs to show")
@click.option("--command", "command_name", default=None, help="Only runs of this command")
def history(limit, command_name):
    """List the most recent runs from the history database."""
    from app.database import init_db as create_tables, session_factory
    from app.services.run_history import recent_runs

    create_tables()
    db = session_factory()()
    try:
        runs = recent_runs(db, limit=limit, command=command_name)
        if not runs:
            click.echo("  No runs recorded yet.")
            return
        for run in runs:
            colour = {"success": "green", "verdict_failure": "yellow"}.get(run.status, "red")
            status = click.style(f"{run.status:<15}", fg=colour)
            click.echo(
                f"  #{run.id:<4} {run.started_at:%Y-%m-%d %H:%M:%S}  {run.command:<15} {status} "
                f"seed={run.seed:<6} hash={run.short_hash}  {run.duration_display}"
            )
    finally:
        db.close()


if __name__ == "__main__":
    cli()
