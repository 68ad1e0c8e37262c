from pydantic_settings import BaseSettings, SettingsConfigDict
from pathlib import Path
from typing import Literal, Optional


class Settings(BaseSettings):
    model_config = SettingsConfigDict(
        env_prefix="EMUS_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=False,
        extra="ignore",
    )

    # Project
    project_name: str = "emus"

    # Paths
    base_dir: Path = Path(__file__).resolve().parent.parent
    data_dir: Path = base_dir / "data"
    runs_dir: Path = data_dir / "runs"

    # Database (run ledger)
    database_url: Optional[str] = None

    # Processing
    max_workers: int = 4
    chunk_size: int = 4_194_304  # psi evaluations per accumulation chunk

    # Samplers
    langevin_dt: float = 1e-3
    stretch_a: float = 2.0
    thin: int = 1

    # Estimator
    iter_tol: float = 1e-8
    iter_max: int = 100
    stationary_method: Literal["gth", "qr"] = "gth"
    negative_tol: float = 1e-12

    # Error analysis
    acor_window: float = 5.0
    acor_min_length: int = 100

    # Logging
    log_level: str = "INFO"

    def __init__(self, **kwargs):
        super().__init__(**kwargs)
        # Create directories if they don't exist
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.runs_dir.mkdir(parents=True, exist_ok=True)


# Create global settings instance
settings = Settings()
