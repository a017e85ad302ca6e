"""
Configuration management using Pydantic settings.
Only the output directory may come from the environment (BITSPLIT_OUTPUT_DIR or a .env file);
everything else is read from experiment config files.
"""
from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict

from bitsplit import __version__

APP_NAME = "bitsplit"
APP_VERSION = __version__

# Artifact streaming
CHUNK_SIZE = 1024 * 1024


class Settings(BaseSettings):
    """Toolkit settings with environment variable support."""

    output_dir: str = "runs"

    model_config = SettingsConfigDict(
        env_prefix="BITSPLIT_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    def get_output_path(self) -> Path:
        """Get the resolved output base path, creating it if needed."""
        path = Path(self.output_dir).resolve()
        path.mkdir(parents=True, exist_ok=True)
        return path


# Global settings instance
settings = Settings()
