"""
Logging configuration for Pitch Kinematics.
Provides structured logging with console and optional file handlers.
"""
import logging
import sys
import json
from pathlib import Path
from datetime import datetime, timezone
from typing import Optional
from logging.handlers import RotatingFileHandler

from app.config import settings


# Structured fields copied from `extra=` into JSON records
EXTRA_FIELDS = (
    "command",
    "exit_code",
    "entity_id",
    "entity_count",
    "window_start",
    "iterations",
    "loglik",
    "converged",
    "epoch",
    "mean_loss",
    "mean_kl",
    "duration_ms",
)


class JSONFormatter(logging.Formatter):
    """Custom JSON formatter for structured logging."""

    def format(self, record: logging.LogRecord) -> str:
        """Format log record as JSON."""
        log_data = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)

        for field in EXTRA_FIELDS:
            if hasattr(record, field):
                log_data[field] = getattr(record, field)

        return json.dumps(log_data, default=str)


class TextFormatter(logging.Formatter):
    """Standard text formatter for human-readable logs."""

    def __init__(self):
        super().__init__(
            fmt="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        )


def setup_logger(
    name: str,
    log_file: Optional[str] = None,
    level: Optional[str] = None,
) -> logging.Logger:
    """
    Set up a logger with console and (optionally) file handlers.

    Args:
        name: Logger name
        log_file: Optional log file name (relative to LOG_DIR), used only
            when LOG_TO_FILE is enabled
        level: Optional log level override

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)

    log_level = level or settings.LOG_LEVEL
    logger.setLevel(getattr(logging, log_level.upper()))

    # Prevent duplicate handlers
    if logger.handlers:
        return logger

    if settings.LOG_FORMAT == "json":
        formatter = JSONFormatter()
    else:
        formatter = TextFormatter()

    # stdout is reserved for command results
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(logging.DEBUG if settings.DEBUG else logging.INFO)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file and settings.LOG_TO_FILE:
        log_dir = Path(settings.LOG_DIR)
        log_dir.mkdir(parents=True, exist_ok=True)

        file_handler = RotatingFileHandler(
            log_dir / log_file,
            maxBytes=10 * 1024 * 1024,  # 10MB
            backupCount=5,
            encoding="utf-8"
        )
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


# Application loggers
app_logger = setup_logger("pitchkin.app", "app.log")
error_logger = setup_logger("pitchkin.error", "error.log", "ERROR")
estimation_logger = setup_logger("pitchkin.estimation", "estimation.log")
training_logger = setup_logger("pitchkin.training", "training.log")


def log_window_fit(
    window_start: int,
    iterations: int,
    loglik: float,
    converged: bool,
    duration_ms: float,
):
    """
    Log the outcome of one sliding-window likelihood fit.

    Args:
        window_start: Index of the first sample in the window
        iterations: BFGS iterations used
        loglik: Log-likelihood at the returned parameters
        converged: Whether the gradient tolerance was met
        duration_ms: Fit duration in milliseconds
    """
    record = {
        "window_start": window_start,
        "iterations": iterations,
        "loglik": loglik,
        "converged": converged,
        "duration_ms": duration_ms,
    }

    if converged:
        estimation_logger.debug(f"Window {window_start} fitted", extra=record)
    else:
        estimation_logger.warning(f"Window {window_start} did not converge", extra=record)


def log_epoch(epoch: int, mean_loss: float, mean_kl: float, duration_ms: float):
    """
    Log per-epoch VAE training statistics.

    Args:
        epoch: 1-based epoch number
        mean_loss: Mean training objective over the epoch
        mean_kl: Mean KL term over the epoch
        duration_ms: Epoch duration in milliseconds
    """
    training_logger.debug(
        f"Epoch {epoch}: loss={mean_loss:.6f} kl={mean_kl:.6f}",
        extra={
            "epoch": epoch,
            "mean_loss": mean_loss,
            "mean_kl": mean_kl,
            "duration_ms": duration_ms,
        }
    )


def log_command(command: str, exit_code: int, duration_ms: float):
    """
    Log a finished CLI command.

    Args:
        command: Subcommand name
        exit_code: Process exit status
        duration_ms: Wall-clock duration in milliseconds
    """
    app_logger.info(
        f"{command} finished with exit code {exit_code}",
        extra={
            "command": command,
            "exit_code": exit_code,
            "duration_ms": duration_ms,
        }
    )
