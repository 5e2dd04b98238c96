"""
Configuration management using Pydantic Settings
Process-level knobs come from the environment (.env supported); run-specific
values come from the YAML run config (see config_loader)
"""
from typing import Optional

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Process settings - overridable with EDGEBOT_* environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="EDGEBOT_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    debug: bool = False

    # Networking (live runs)
    listen_host: str = "127.0.0.1"
    listen_port: int = Field(default=7400, ge=1, le=65535)
    connect_timeout_s: float = Field(default=10.0, gt=0)

    # Outputs
    output_dir: str = "./runs"

    # Edge status line
    status_interval_s: float = Field(default=1.0, gt=0)
    enable_status_line: bool = True

    # Real-time pacing: 0 runs the simulated clock as fast as possible,
    # 1.0 paces ticks at wall-clock rate
    time_scale: float = Field(default=0.0, ge=0)

    # Logging
    log_level: str = "INFO"
    log_file_path: Optional[str] = None
    log_max_size: str = "50MB"
    log_backup_count: int = 5


# Global settings instance
settings = Settings()


def reload_settings() -> Settings:
    """Reload settings from environment variables"""
    global settings
    settings = Settings()
    return settings
