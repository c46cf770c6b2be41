"""Application configuration loaded from environment variables."""

from pathlib import Path
from pydantic_settings import BaseSettings, SettingsConfigDict


BASE_DIR = Path(__file__).resolve().parent.parent


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="VOLTERRISK_",
        env_file=str(BASE_DIR / ".env"),
        env_file_encoding="utf-8",
        case_sensitive=False,
    )

    # Application
    app_name: str = "Volterrisk"
    debug: bool = False
    log_level: str = "INFO"

    # Artifacts
    output_dir: str = "out"

    # Run history
    database_url: str = f"sqlite:///{BASE_DIR / 'data' / 'volterrisk.db'}"
    record_history: bool = True

    # Worker cap for row/path parallelism
    threads: int = 1

    # Numerical guards
    max_condition_number: float = 1e10
    resolvent_max_order: int = 400
    oracle_max_leaves: int = 5_000_000
    quadrature_points: int = 40


settings = Settings()
