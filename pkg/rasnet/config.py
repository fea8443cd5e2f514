"""
Configuration management for rasnet.
Loads environment variables and provides process-wide settings.
"""

from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load environment variables from .env file
load_dotenv()


class Settings(BaseSettings):
    """Process-wide settings loaded from RASNET_* environment variables."""

    model_config = SettingsConfigDict(env_prefix="RASNET_", env_file=".env", case_sensitive=False, extra="ignore")

    # Data and output locations
    data_dir: Path = Field(default=Path("data"))
    out_dir: Path = Field(default=Path("runs"))
    log_dir: Optional[Path] = Field(default=None)  # defaults to <out>/logs

    # Logging
    log_level: str = Field(default="INFO")
    console_logging: bool = Field(default=True)

    # Numerics
    check_finite: bool = Field(default=True)  # raise on NaN/Inf after every forward op
    num_threads: int = Field(default=1)  # BLAS threads while benchmarking


# Global settings instance
settings = Settings()


def validate_config() -> bool:
    """Validate that the loaded settings are usable."""
    try:
        if settings.num_threads < 1:
            return False
        if settings.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            return False
        return True
    except Exception:
        return False
