import json
import sys
from pathlib import Path
from typing import Annotated, get_args

import typer
from loguru import logger
from rich import print as rich_print
from rich.table import Table

from utils.constants import EXIT_UNEXPECTED
from utils.custom_types import AuditBundle, Command
from utils.errors import AuditViolationError, LabError
from utils.misc import json_log_format, load_experiment_config, stderr_log_format
from utils.pipelines import run

app = typer.Typer(help="Variational solver and regularity diagnostics for p-growth elasticity.")

logger.remove()
logger.add(sys.stdout, format=stderr_log_format, level="INFO")

ConfigOption = Annotated[Path, typer.Option("--config", help="Experiment YAML file.")]
SeedOption = Annotated[int | None, typer.Option("--seed", help="Overrides output.seed.")]
OutOption = Annotated[Path | None, typer.Option("--out", help="Overrides output.directory.")]
ThreadsOption = Annotated[int | None, typer.Option("--threads", help="Overrides threads.")]


def audit_table(bundle_path: Path) -> Table:
    bundle = AuditBundle.model_validate(json.loads(bundle_path.read_text()))
    table = Table(title=f"Inequality audits (seed {bundle.seed}, {bundle.samples} samples)")
    for column in ("lemma", "p", "mu", "n", "lo", "hi", "status"):
        table.add_column(column)
    for record in bundle.records:
        if record.skipped:
            status = "[dim]skipped[/dim]"
        elif record.violated:
            status = "[red]VIOLATED[/red]"
        else:
            status = "[green]ok[/green]" if record.hard else "range"
        table.add_row(
            record.lemma_id,
            f"{record.p:g}",
            f"{record.mu:g}",
            str(record.dim),
            f"{record.empirical_lo:.4g}",
            f"{record.empirical_hi:.4g}",
            status,
        )
    return table


def execute(
    config_path: Path,
    command: str | None,
    seed: int | None,
    out: Path | None,
    threads: int | None,
) -> None:
    """Load the config, run one pipeline and map failures to exit codes."""
    sink_id = None
    try:
        config = load_experiment_config(
            config_path,
            {"command": command, "seed": seed, "directory": str(out) if out else None, "threads": threads},
        )
        out_dir = config.output.directory
        sink_id = logger.add(
            out_dir / "logs" / "lab.log", format=json_log_format, rotation="500 MB"
        )
        bundle_path = out_dir / "audit.json"
        try:
            written = run(config, out_dir, config.threads)
        except AuditViolationError:
            if bundle_path.exists():
                rich_print(audit_table(bundle_path))
            raise
        if config.command == "audit" and bundle_path.exists():
            rich_print(audit_table(bundle_path))
        rich_print(f"[green]Wrote {len(written)} files to {out_dir}[/green]")
    except LabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        raise typer.Exit(code=e.exit_code) from None
    except Exception:
        logger.exception("Unexpected failure")
        raise typer.Exit(code=EXIT_UNEXPECTED) from None
    finally:
        if sink_id is not None:
            logger.remove(sink_id)


@app.command("run")
def run_command(
    config: ConfigOption,
    seed: SeedOption = None,
    out: OutOption = None,
    threads: ThreadsOption = None,
) -> None:
    """Run the command named in the config file."""
    execute(config, None, seed, out, threads)


def _register(name: str) -> None:
    def command(
        config: ConfigOption,
        seed: SeedOption = None,
        out: OutOption = None,
        threads: ThreadsOption = None,
    ) -> None:
        execute(config, name, seed, out, threads)

    command.__doc__ = f"Run the {name} pipeline (overrides the config's command)."
    app.command(name)(command)


for _name in get_args(Command):
    _register(_name)


if __name__ == "__main__":
    app()
