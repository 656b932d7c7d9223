"""
Configuration module for the glaucoma self-training pipeline.

This module defines process-wide settings loaded from environment variables.
Settings are validated using Pydantic for type safety. Experiment-level
configuration (synthetic data, architecture, training, experiment mode) lives
in pydantic models beside the code that consumes it.
"""
from typing import Optional
from pydantic import field_validator
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """
    Application settings loaded from environment variables.

    All settings can be overridden via environment variables or .env file.
    Type validation is performed automatically by Pydantic.
    """

    # ========================================================================
    # LOGGING CONFIGURATION
    # ========================================================================

    log_level: str = "INFO"
    """Minimum level for console logging"""

    log_file: Optional[str] = None
    """Optional file receiving DEBUG-level logs"""

    log_json: bool = True
    """Emit structured JSON log lines instead of plain text"""

    # ========================================================================
    # RUNTIME CONFIGURATION
    # ========================================================================

    data_workers: int = 4
    """Threads used to decode B-scan PNG files"""

    torch_threads: int = 1
    """CPU threads handed to torch (1 keeps runs reproducible)"""

    default_seed: int = 0
    """Seed used when a command does not receive --seed"""

    output_root: str = "runs"
    """Default directory for command outputs when --out is omitted"""

    @field_validator('log_level')
    @classmethod
    def normalize_log_level(cls, v: str) -> str:
        """
        Normalize log level names.

        Handles cases like "debug" -> "DEBUG"; unknown names fall back to INFO.
        """
        if not v:
            return "INFO"
        v = v.strip().upper()
        if v == "WARN":
            return "WARNING"
        if v not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            return "INFO"
        return v

    @field_validator('data_workers', 'torch_threads')
    @classmethod
    def at_least_one(cls, v: int) -> int:
        """Thread counts below one are clamped to one."""
        return max(1, int(v))

    class Config:
        """Pydantic configuration."""
        env_file = ".env"
        case_sensitive = False


# Global settings instance
settings: Settings = Settings()
