# settings.py
import logging
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from core.errors import ConfigurationError


class Settings(BaseSettings):
    """Process-level settings, read from the environment and an optional .env file"""
    model_config = SettingsConfigDict(env_prefix="RTE_", env_file=".env", extra="ignore")

    workers: int = Field(default=4, ge=1)
    log_level: str = "INFO"
    output_dir: str = "results"

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        level = value.upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f"unknown log level: {value}")
        return level


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    load_dotenv()
    try:
        return Settings()
    except ValidationError as e:
        raise ConfigurationError(f"Invalid RTE_* environment settings: {e}") from e


def configure_logging(settings: Settings | None = None) -> None:
    settings = settings or get_settings()
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )
