"""Command handlers for the fedsim CLI. Each one delegates to app.services.experiment."""

import logging
from pathlib import Path
from typing import List, Optional

import typer

from app.config import settings
from app.core.errors import ConfigError, SimulatorError
from app.services import experiment

logger = logging.getLogger(__name__)

ConfigOption = typer.Option(..., "--config", "-c", help="Flat YAML experiment config")
OutOption = typer.Option(None, "--out", "-o", help="Output directory (overrides output_dir)")
SeedOption = typer.Option(None, "--seed", help="Overrides master_seed")


def _fail(exc: Exception) -> typer.Exit:
    if isinstance(exc, SimulatorError):
        logger.error(f"{type(exc).__name__}: {exc}")
        return typer.Exit(code=exc.exit_code)
    logger.exception(f"Unexpected failure: {exc}")
    return typer.Exit(code=1)


def _load(config: Path, out: Optional[Path], seed: Optional[int]):
    return experiment.load_experiment_config(config, {"output_dir": out, "master_seed": seed})


def cmd_run(
    config: Path = ConfigOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    workers: Optional[int] = typer.Option(None, "--workers", "-w", min=1, help="Threads for party-local training"),
    checkpoint: bool = typer.Option(False, "--checkpoint", help="Save federation.ckpt after every round"),
    resume: Optional[Path] = typer.Option(None, "--resume", help="Continue from a federation checkpoint"),
) -> None:
    """Run one federated experiment and write rounds.csv, model.ckpt and the config echo."""
    try:
        cfg = _load(config, out, seed)
        experiment.run_experiment(
            cfg,
            workers=workers or settings.FEDSIM_DEFAULT_WORKERS,
            write_metrics=settings.FEDSIM_ENABLE_METRICS,
            checkpoint=checkpoint,
            resume_from=resume,
        )
    except Exception as exc:
        raise _fail(exc) from exc


def cmd_partition(
    config: Path = ConfigOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
) -> None:
    """Partition the training data and write partition.json and class_counts.csv."""
    try:
        experiment.partition_experiment(_load(config, out, seed))
    except Exception as exc:
        raise _fail(exc) from exc


def cmd_compare(
    rounds_files: List[Path] = typer.Argument(..., help="rounds.csv files to compare"),
    baseline: str = typer.Option("fedavg", "--baseline", "-b", help="Algorithm label used as the target"),
    out: Optional[Path] = OutOption,
) -> None:
    """Rounds needed to reach the baseline's final accuracy, and the speedup."""
    try:
        missing = [str(p) for p in rounds_files if not p.is_file()]
        if missing:
            raise ConfigError(f"rounds file(s) not found: {', '.join(missing)}")
        experiment.compare_runs(rounds_files, baseline, out)
    except Exception as exc:
        raise _fail(exc) from exc
