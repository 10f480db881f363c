"""
Runtime settings and configuration management.
"""
import os
from pathlib import Path
from typing import Optional

from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

DEFAULT_SCENARIO = Path(__file__).resolve().parent / "default_scenario.yaml"


class Settings(BaseSettings):
    """Runtime settings with environment variable support (prefix TERRAFUSION_)."""

    # Runner
    output_dir: str = Field(default="./runs", description="Parent directory of run directories")
    workers: Optional[int] = Field(default=None, ge=1, description="Worker pool size")
    output_rate_hz: float = Field(default=10.0, gt=0.0, description="Filter output grid rate")
    default_config: str = Field(default=str(DEFAULT_SCENARIO))

    # Logging
    log_level: str = Field(default="INFO")
    log_file: Optional[str] = Field(default=None)

    @field_validator("workers", mode="before")
    @classmethod
    def parse_workers(cls, v):
        """Handle empty worker count."""
        if isinstance(v, str) and not v.strip():
            return None
        return v

    @field_validator("log_file", mode="before")
    @classmethod
    def parse_log_file(cls, v):
        """Handle empty log file."""
        if isinstance(v, str) and not v.strip():
            return None
        return v

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        """Validate log level."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"Log level must be one of: {valid_levels}")
        return v.upper()

    @property
    def worker_count(self) -> int:
        """Configured pool size, defaulting to the available parallelism."""
        if self.workers:
            return self.workers
        if hasattr(os, "sched_getaffinity"):
            return max(1, len(os.sched_getaffinity(0)))
        return os.cpu_count() or 1

    model_config = SettingsConfigDict(
        env_prefix="TERRAFUSION_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )
