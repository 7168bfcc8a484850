"""
Configuration management for Pitch Kinematics.
All settings can be overridden via environment variables.
"""
from pydantic_settings import BaseSettings
from typing import Optional
import os


class Settings(BaseSettings):
    """Application settings with environment variable support."""

    # Application
    APP_NAME: str = "Pitch Kinematics"
    APP_VERSION: str = "1.0.0"
    DEBUG: bool = False

    # Field geometry (centimeters) and sampling
    FIELD_X_MIN: float = -5250.0
    FIELD_X_MAX: float = 5250.0
    FIELD_Y_MIN: float = -3400.0
    FIELD_Y_MAX: float = 3400.0
    FIELD_TOLERANCE_CM: float = 100.0  # throw-ins and overshoot
    SAMPLE_DT: float = 0.1

    # Kalman filter
    DIFFUSE_TOLERANCE: float = 1e-9
    SINGULAR_CONDITION: float = 1e12
    DEFAULT_KAPPA: float = 1e7
    INIT_MODE: str = "exact-diffuse"  # "exact-diffuse" or "large-kappa"

    # Estimation
    WINDOW_LENGTH: int = 10
    MIN_WINDOW_LENGTH: int = 5
    ALL_ENTITY_WINDOW_LENGTH: int = 5
    PARAM_MODE: str = "cholesky"  # "cholesky" or "raw"
    BFGS_GTOL: float = 1e-6
    BFGS_MAX_ITER: int = 200
    FD_STEP: float = 1e-5
    ARMIJO_C1: float = 1e-4
    ARMIJO_SHRINK: float = 0.5
    ARMIJO_MAX_STEPS: int = 40
    START_Q: float = 100.0  # (cm/s^2)^2 on the diagonal
    START_SIGMA: float = 30.0  # cm
    WARM_START: bool = False
    FIT_EXECUTOR: str = "local"  # "local" or "celery"

    # Prediction
    PREDICTION_HORIZON: int = 5
    RECTANGLE_Z: float = 1.96

    # Variational autoencoder
    VAE_LATENT_DIM: int = 10
    VAE_HIDDEN: int = 400
    VAE_SIGMA_X: float = 0.15
    VAE_EPOCHS: int = 1000
    VAE_BATCH_SIZE: int = 32
    VAE_LEARNING_RATE: float = 0.001
    VAE_RHO: float = 0.9
    VAE_EPSILON: float = 1e-7
    VAE_TRAJECTORY_STEPS: int = 500

    # Redis Configuration
    REDIS_HOST: str = "localhost"
    REDIS_PORT: int = 6379
    REDIS_DB: int = 0
    REDIS_URL: Optional[str] = None

    @property
    def redis_url(self) -> str:
        """Get Redis URL, either from REDIS_URL or construct from components."""
        if self.REDIS_URL:
            return self.REDIS_URL
        return f"redis://{self.REDIS_HOST}:{self.REDIS_PORT}/{self.REDIS_DB}"

    # Celery Configuration
    CELERY_BROKER_URL: Optional[str] = None
    CELERY_RESULT_BACKEND: Optional[str] = None
    CELERY_TASK_SERIALIZER: str = "json"
    CELERY_RESULT_SERIALIZER: str = "json"
    CELERY_ACCEPT_CONTENT: list = ["json"]
    CELERY_TIMEZONE: str = "UTC"
    CELERY_ENABLE_UTC: bool = True
    CELERY_WORKER_CONCURRENCY: int = 4
    CELERY_ALWAYS_EAGER: bool = False

    @property
    def celery_broker(self) -> str:
        """Get Celery broker URL."""
        return self.CELERY_BROKER_URL or self.redis_url

    @property
    def celery_backend(self) -> str:
        """Get Celery result backend URL."""
        return self.CELERY_RESULT_BACKEND or self.redis_url

    # Outputs
    OUTPUT_DIR: str = "output"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_DIR: str = "logs"
    LOG_FORMAT: str = "text"  # "json" or "text"
    LOG_TO_FILE: bool = False

    class Config:
        env_file = ".env"
        case_sensitive = True


# Global settings instance
settings = Settings()


def ensure_directories():
    """Create output (and log) directories if they don't exist."""
    directories = [settings.OUTPUT_DIR]
    if settings.LOG_TO_FILE:
        directories.append(settings.LOG_DIR)

    for directory in directories:
        os.makedirs(directory, exist_ok=True)
