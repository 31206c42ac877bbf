from pydantic import Field
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """
    Process-level settings for the simulator.

    All settings can be overridden using environment variables.
    Experiment hyperparameters live in the YAML config, not here.
    """

    # Logging settings
    FEDSIM_LOG_LEVEL: str = Field(
        default="INFO",
        description="Log verbosity for the fedsim CLI (DEBUG adds per-party local-training summaries)"
    )

    # Metrics settings
    FEDSIM_ENABLE_METRICS: bool = Field(
        default=True,
        description="Collect prometheus round metrics and write metrics.prom next to run outputs"
    )

    # Execution settings
    FEDSIM_DEFAULT_WORKERS: int = Field(
        default=1,
        ge=1,
        description="Worker threads for party-local training when --workers is not given"
    )


settings = Settings()
