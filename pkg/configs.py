from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()


class LoggingSettings(BaseSettings):
    """Logging configuration settings"""

    log_level: str = Field(
        default="INFO",
        description="Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)"
    )

    log_format: str = Field(
        default="%(asctime)s | %(levelname)-8s | %(filename)s:%(funcName)s:%(lineno)d | %(message)s",
        description="Log message format"
    )

    log_datefmt: str = Field(
        default="%Y-%m-%d %H:%M:%S",
        description="Timestamp format used by the log formatter"
    )

    # File logging
    log_file: Optional[str] = Field(
        default=None,
        description="Log file path (if None, logs to console only)"
    )

    max_log_file_size: int = Field(
        default=10 * 1024 * 1024,  # 10MB
        description="Maximum log file size in bytes"
    )

    backup_log_count: int = Field(
        default=5,
        description="Number of backup log files to keep"
    )

    model_config = SettingsConfigDict(
        env_prefix="DAMAGE_",
        env_file_encoding="utf-8",
        extra="forbid",
    )

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        level = v.upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Unknown log level: {v}")
        return level


class RuntimeSettings(BaseSettings):
    """Execution settings shared by every pipeline command"""

    jobs: int = Field(
        default=1,
        ge=1,
        description="Worker threads for parallel stages (forest fitting, rendering, scanning)"
    )

    progress: bool = Field(
        default=True,
        description="Show tqdm progress bars during training and scanning"
    )

    scan_batch_size: int = Field(
        default=64,
        ge=1,
        description="Patches per forward pass during the dense scan"
    )

    lock_filename: str = Field(
        default=".lock",
        description="Lock file created inside the output directory for the duration of a run"
    )

    manifest_filename: str = Field(
        default="manifest.json",
        description="Run manifest file name inside the output directory"
    )

    model_config = SettingsConfigDict(
        env_prefix="DAMAGE_",
        env_file_encoding="utf-8",
        extra="forbid",
    )


class AppSettings(BaseSettings):
    """Application identity"""

    app_name: str = Field(
        default="damage-monitor",
        description="Application name"
    )

    app_description: str = Field(
        default="Two-stage building destruction detection on multi-date satellite imagery",
        description="Application description"
    )

    app_version: str = Field(
        default="0.1.0",
        description="Application version"
    )

    model_config = SettingsConfigDict(
        env_prefix="DAMAGE_",
        env_file_encoding="utf-8",
        extra="forbid",
    )


class Settings(BaseSettings):
    """Main application settings that combines all configuration sections"""

    logging: LoggingSettings = Field(default_factory=LoggingSettings)
    runtime: RuntimeSettings = Field(default_factory=RuntimeSettings)
    app: AppSettings = Field(default_factory=AppSettings)

    model_config = SettingsConfigDict(
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="forbid",
    )


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get the global settings instance"""
    return settings


# Convenience functions for accessing specific settings sections
def get_logging_settings() -> LoggingSettings:
    """Get logging settings"""
    return settings.logging


def get_runtime_settings() -> RuntimeSettings:
    """Get runtime settings"""
    return settings.runtime


def get_app_settings() -> AppSettings:
    """Get application settings"""
    return settings.app
