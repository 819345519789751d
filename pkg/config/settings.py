"""
Beamsim Configuration Settings
Environment-based configuration using Pydantic
"""

from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load environment variables from .env file
load_dotenv()


class Settings(BaseSettings):
    """Process-wide settings read from BEAMSIM_* environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="BEAMSIM_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Worker cap for evaluation and dataset generation
    threads: int = Field(default=1, ge=1, description="Maximum worker threads")

    # Logging Configuration
    log_level: str = Field(default="INFO")
    log_format: Literal["json", "console"] = Field(default="json")

    # Training progress bars (tqdm)
    progress: bool = Field(default=False)

    # Default output directory for runs
    output_dir: str = Field(default="./runs")


# Global settings instance
_settings: Optional[Settings] = None


def get_settings() -> Settings:
    """Get settings singleton"""
    global _settings
    if _settings is None:
        _settings = Settings()
    return _settings


def reset_settings() -> None:
    """Drop the cached settings so the next call re-reads the environment"""
    global _settings
    _settings = None
