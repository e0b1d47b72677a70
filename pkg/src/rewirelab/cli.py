import logging
import shutil
import sys
from pathlib import Path
from typing import Annotated, Optional

import typer
import yaml
from pydantic import ValidationError
from rich import print
from rich.logging import RichHandler
from rich.markup import escape

from rewirelab.config import default_config_path, read_config
from rewirelab.experiments import EXIT_CONFIG, run_experiment
from rewirelab.reporting import (
    Format,
    load_summary,
    merge_tables,
    render,
    summary_tables,
)

app = typer.Typer()

ConfigOption = Annotated[
    Path,
    typer.Option("--config", "-c", help="Experiment config file (YAML)"),
]
SeedOption = Annotated[
    Optional[str],
    typer.Option("--seed-list", help="Comma separated seeds, e.g. 42,123"),
]
JobsOption = Annotated[
    Optional[int],
    typer.Option("--jobs", "-j", min=1, help="Runs to train in parallel"),
]
ResumeOption = Annotated[
    bool,
    typer.Option("--resume", help="Skip runs already in the ledger"),
]
OutOption = Annotated[
    Optional[Path],
    typer.Option("--out", "-o", help="Output directory"),
]
VerboseOption = Annotated[
    bool,
    typer.Option("--verbose", "-v", help="Log every epoch"),
]


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(show_path=False)],
        force=True,
    )


def _config_error(message: str) -> None:
    print(f"[bold red]Error:[/bold red] {escape(message)}")
    sys.exit(EXIT_CONFIG)


def _run(
    experiment: str,
    config: Path,
    seed_list: Optional[str],
    jobs: Optional[int],
    resume: bool,
    out: Optional[Path],
    verbose: bool,
) -> None:
    _setup_logging(verbose)
    try:
        experiment_config = read_config(
            config,
            experiment=experiment,
            seeds=seed_list,
            jobs=jobs,
            output=out,
        )
    except FileNotFoundError as e:
        _config_error(str(e))
    except ValidationError as e:
        for error in e.errors():
            field = ".".join(str(part) for part in error["loc"]) or "config"
            print(
                f"[bold red]Error:[/bold red] {escape(field)}: "
                f"{escape(error['msg'])}"
            )
        sys.exit(EXIT_CONFIG)
    except (yaml.YAMLError, ValueError) as e:
        _config_error(f"Invalid config {config}: {e}")

    summary, root = run_experiment(experiment_config, resume)

    tables = summary_tables(summary.model_dump())
    if tables:
        print(escape(render(tables, "markdown")))
    if summary.error:
        print(f"[bold red]Error:[/bold red] {escape(summary.error)}")
    if summary.failed_seeds:
        print(
            "[bold yellow]Failed seeds:[/bold yellow] "
            f"{', '.join(str(s) for s in summary.failed_seeds)}"
        )
    print(f"Summary written to '{root / 'summary.json'}'")
    if summary.exit_code:
        sys.exit(summary.exit_code)


@app.command()
def init(path: Path) -> None:
    """Write a commented example config to start from."""
    if path.exists():
        print(f"[bold red]Error:[/bold red] '{path}' already exists")
        sys.exit(EXIT_CONFIG)
    shutil.copy(default_config_path(), path)
    print(f"Config written to '{path}'")


@app.command()
def train(
    config: ConfigOption,
    seed_list: SeedOption = None,
    jobs: JobsOption = None,
    resume: ResumeOption = False,
    out: OutOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Train one arm over the seed list."""
    _run("train", config, seed_list, jobs, resume, out, verbose)


@app.command()
def decompose(
    config: ConfigOption,
    seed_list: SeedOption = None,
    jobs: JobsOption = None,
    resume: ResumeOption = False,
    out: OutOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Split the bilevel gain into inner-loop and graph channels."""
    _run("decompose", config, seed_list, jobs, resume, out, verbose)


@app.command()
def tsweep(
    config: ConfigOption,
    seed_list: SeedOption = None,
    jobs: JobsOption = None,
    resume: ResumeOption = False,
    out: OutOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Sweep the number of inner steps."""
    _run("tsweep", config, seed_list, jobs, resume, out, verbose)


@app.command()
def corruption(
    config: ConfigOption,
    seed_list: SeedOption = None,
    jobs: JobsOption = None,
    resume: ResumeOption = False,
    out: OutOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Decompose the gain under increasing edge corruption."""
    _run("corruption", config, seed_list, jobs, resume, out, verbose)


@app.command()
def distill(
    config: ConfigOption,
    seed_list: SeedOption = None,
    jobs: JobsOption = None,
    resume: ResumeOption = False,
    out: OutOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Retrain vanilla on a learned graph."""
    _run("distill", config, seed_list, jobs, resume, out, verbose)


@app.command()
def spectra(
    config: ConfigOption,
    out: OutOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Spectral report of the dataset graph and any given graphs."""
    _run("spectra", config, None, None, False, out, verbose)


@app.command()
def jacobian(
    config: ConfigOption,
    seed_list: SeedOption = None,
    jobs: JobsOption = None,
    resume: ResumeOption = False,
    out: OutOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Input sensitivity of trained models by hop distance."""
    _run("jacobian", config, seed_list, jobs, resume, out, verbose)


@app.command("igr-oracle")
def igr_oracle(
    config: ConfigOption,
    out: OutOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Order of gradient descent's deviation from two continuous flows."""
    _run("igr-oracle", config, None, None, False, out, verbose)


@app.command("bandwidth-ablation")
def bandwidth_ablation(
    config: ConfigOption,
    out: OutOption = None,
    verbose: VerboseOption = False,
) -> None:
    """Kernel graph structure under several bandwidth rules."""
    _run("bandwidth-ablation", config, None, None, False, out, verbose)


@app.command()
def report(
    summaries: list[Path],
    fmt: Annotated[
        str,
        typer.Option("--format", "-f", help="json, csv or markdown"),
    ] = "markdown",
    out: OutOption = None,
) -> None:
    """Render the tables of one or more experiment summaries."""
    if fmt not in ("json", "csv", "markdown"):
        print(f"[bold red]Error:[/bold red] Unknown format '{fmt}'")
        sys.exit(EXIT_CONFIG)
    try:
        tables = merge_tables(load_summary(path) for path in summaries)
    except (FileNotFoundError, ValueError) as e:
        print(f"[bold red]Error:[/bold red] {escape(str(e))}")
        sys.exit(EXIT_CONFIG)

    format: Format = fmt
    if out is None:
        sys.stdout.write(render(tables, format) + "\n")
        return

    out.mkdir(parents=True, exist_ok=True)
    suffix = {"json": "json", "csv": "csv", "markdown": "md"}[format]
    for key, frame in tables.items():
        path = out / f"{key}.{suffix}"
        path.write_text(render({key: frame}, format) + "\n")
        print(f"Wrote '{path}'")
