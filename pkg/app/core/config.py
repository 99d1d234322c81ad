import logging
import os
from functools import lru_cache
from typing import Optional

from dotenv import load_dotenv
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load .env.local first (for local development), then .env (for defaults)
if os.path.exists('.env.local'):
    load_dotenv('.env.local', override=True)
load_dotenv('.env')


class Settings(BaseSettings):
    APP_NAME: str = "MDT Desk"

    # --- DEBUG ---
    DEBUG: bool = False

    # --- LOGGING ---
    LOG_LEVEL: str = "INFO"
    LOG_JSON: bool = True
    LOG_DIR: Optional[str] = None

    # Caps BLAS/OpenMP threads used inside numpy kernels
    MDT_THREADS: Optional[int] = Field(default=None, ge=1)

    @field_validator('LOG_LEVEL')
    @classmethod
    def validate_log_level(cls, v):
        level = v.upper()
        if not isinstance(logging.getLevelName(level), int):
            raise ValueError(f'LOG_LEVEL must be a logging level name, got {v!r}')
        return level

    model_config = SettingsConfigDict(
        env_file=".env",
        extra="ignore",
        case_sensitive=True,
    )


@lru_cache()
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()


try:
    settings = get_settings()
except Exception as e:
    print(f"❌ Configuration error: {e}")
    print("Check MDT_THREADS / LOG_LEVEL in your environment or .env file.")
    raise
