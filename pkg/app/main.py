import logging

import typer

from app.api import commands
from app.config import settings

cli = typer.Typer(
    name="fedsim",
    help="Deterministic federated-learning simulator (MOON, FedAvg, FedProx, SCAFFOLD, FedAvgM, SOLO).",
    no_args_is_help=True,
    add_completion=False,
)


@cli.callback()
def configure_logging() -> None:
    logging.basicConfig(
        level=settings.FEDSIM_LOG_LEVEL.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


cli.command("run")(commands.cmd_run)
cli.command("partition")(commands.cmd_partition)
cli.command("compare")(commands.cmd_compare)


if __name__ == "__main__":
    cli()
