"""
Application Configuration

Loads and manages process-wide tunables from environment variables.
Per-experiment inputs live in experiment spec files, not here.
"""

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Toolkit settings loaded from HARRIS_* environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="HARRIS_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    # Runtime
    log_level: str = "INFO"
    threads: int = 1
    default_version: str = "0.1.0"

    # Simulation
    dt_divisor: int = 256
    output_times: int = 64
    merge_eps: float = 0.0
    max_jitter: float = 1e-6

    # Integral criteria
    bisect_tol: float = 1e-12
    min_shells: int = 40
    max_shells: int = 200
    geometric_ratio: float = 0.9
    monotone_samples: int = 2001

    # Monte Carlo checks
    smoothing_beta: float = 50.0
    quadrature_nodes: int = 64
    verdict_sigmas: float = 3.0
    ratio_band: float = 0.10
    batch_size: int = 100_000

    # Output
    svg_max_points: int = 2048


# Global settings instance
settings = Settings()
