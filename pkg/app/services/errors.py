"""
Exception hierarchy for Pitch Kinematics services.
"""
from typing import Optional


class KinematicsError(Exception):
    """Base class for all service errors."""
    pass


class DataError(KinematicsError):
    """Malformed, out-of-bounds or dimensionally inconsistent input."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"{message}, line {line}"
        super().__init__(message)


class ModelError(KinematicsError):
    """Invalid state-space or network configuration."""
    pass


class NumericalError(KinematicsError):
    """Numerical failure inside a service, located by module and step."""

    def __init__(self, message: str, module: str, step: Optional[int] = None):
        self.module = module
        self.step = step
        location = module if step is None else f"{module}, step {step}"
        super().__init__(f"{message} ({location})")


class TrainingError(NumericalError):
    """Non-finite objective during VAE training."""

    def __init__(self, message: str, epoch: int, batch: int):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"{message} at epoch {epoch}, batch {batch}", module="vae")
