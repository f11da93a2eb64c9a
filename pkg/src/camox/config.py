"""Configuration management using Pydantic Settings."""

import json
from pathlib import Path
from typing import TypeVar

from pydantic import BaseModel, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .errors import ConfigError

ModelT = TypeVar("ModelT", bound=BaseModel)


class Settings(BaseSettings):
    """Application settings loaded from environment variables."""

    # Default dataset root for train/summary when no directory is given
    data_dir: Path = Path("dataset")

    # Where train/report write artifacts when --out is omitted
    output_dir: Path = Path("runs")

    log_level: str = "INFO"

    # Split-level worker processes
    jobs: int = 1

    # Real clinical dataset, enables the conditional acceptance tests
    real_data_dir: Path | None = None

    model_config = SettingsConfigDict(
        env_prefix="CAMOX_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
    )


def load_config(path: Path | str | None, model: type[ModelT], **overrides) -> ModelT:
    """
    Load a JSON config file into a pydantic model and apply overrides.

    Args:
        path: JSON file, or None to start from the model defaults
        model: Pydantic model class to validate against
        **overrides: Field values that win over the file (None values are ignored)

    Returns:
        Validated model instance

    Raises:
        ConfigError: If the file is unreadable or fails validation
    """
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config {path}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config {path} must hold a JSON object")

    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return model.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid {model.__name__}: {e}") from e


# Module-level singleton
settings = Settings()
