from typing import Literal

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process settings loaded from environment variables (prefix ``KPX_``)."""

    model_config = SettingsConfigDict(env_prefix="KPX_", env_file=".env", env_file_encoding="utf-8", extra="ignore")

    # Execution settings
    threads: int = Field(default=1, ge=1, description="Worker threads for neighbor search and row-parallel kernels")
    precision: Literal["float32", "float64"] = "float32"

    # Logging
    log_level: str = "INFO"

    # Paths
    data_dir: str = "data"

    # CLI metadata
    cli_name: str = "kpx"
    cli_version: str = "0.1.0"
    cli_description: str = "Kernel point convolution toolkit: kernel geometry, operators, training, benchmarks"

    # Debug mode
    debug: bool = False


settings = Settings()
