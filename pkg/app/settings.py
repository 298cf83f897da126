from functools import lru_cache
from typing import Literal

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="SSL_", env_file=".env", extra="ignore")

    log_level: str = "info"
    precision: Literal["float32", "float64"] = "float32"
    check_finite: bool = True
    augment_workers: int = 1
    run_slow: bool = False


@lru_cache
def get_settings():
    return Settings()
