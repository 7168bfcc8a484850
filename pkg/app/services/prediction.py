"""
k-step-ahead prediction, 95% rectangles and kinematic diagnostics.
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np

from app.config import settings
from app.services.errors import DataError
from app.services.kalman import FilterState
from app.services.state_space import AnyModel, entity_slices


@dataclass(frozen=True, eq=False)
class Prediction:
    """
    Position forecast `horizon` steps ahead.

    `mean` and `cov` are the observed (position) block W Z, W P W^T; `lower`
    and `upper` bound the per-coordinate rectangle mean -/+ z sqrt(diag cov).
    """

    horizon: int
    mean: np.ndarray
    cov: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    state_mean: np.ndarray
    state_cov: np.ndarray

    @property
    def rectangle(self) -> tuple:
        """(x_lo, x_hi, y_lo, y_hi) of a single entity."""
        return float(self.lower[0]), float(self.upper[0]), float(self.lower[1]), float(self.upper[1])

    def contains(self, point: np.ndarray) -> np.ndarray:
        """Per-coordinate hit mask of `point` against the rectangle."""
        point = np.asarray(point, dtype=float)
        return (point >= self.lower) & (point <= self.upper)

    def entity(self, index: int) -> "Prediction":
        """Single-entity slice of a stacked prediction."""
        state, obs = entity_slices(index)
        return Prediction(
            horizon=self.horizon,
            mean=self.mean[obs],
            cov=self.cov[obs, obs],
            lower=self.lower[obs],
            upper=self.upper[obs],
            state_mean=self.state_mean[state],
            state_cov=self.state_cov[state, state],
        )


def rectangle_bounds(mean: np.ndarray, cov: np.ndarray, z: float = settings.RECTANGLE_Z):
    half = z * np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return mean - half, mean + half


def predict_k(model: AnyModel, state: FilterState, k: int = settings.PREDICTION_HORIZON) -> List[Prediction]:
    """
    Iterate the state equation k times without updates.

    Args:
        model: Model whose T, R, Q propagate the state
        state: Updated state E[z_t | eta_1..eta_t]
        k: Horizon in steps (>= 1)

    Returns:
        Predictions for horizons 1..k
    """
    if k < 1:
        raise DataError(f"Prediction horizon must be at least 1, got {k}")

    T, W, RQR = model.T, model.W, model.RQR
    Z, P = np.asarray(state.Z, dtype=float), np.asarray(state.P, dtype=float)
    predictions = []
    for h in range(1, k + 1):
        Z = T @ Z
        P = T @ P @ T.T + RQR
        P = 0.5 * (P + P.T)
        mean = W @ Z
        cov = W @ P @ W.T
        lower, upper = rectangle_bounds(mean, cov)
        predictions.append(Prediction(
            horizon=h, mean=mean, cov=cov, lower=lower, upper=upper,
            state_mean=Z.copy(), state_cov=P.copy(),
        ))
    return predictions


@dataclass(frozen=True, eq=False)
class KinematicsSeries:
    """Velocity (cm/s) and speed per step."""

    velocity: np.ndarray
    speed: np.ndarray

    def __len__(self) -> int:
        return self.speed.size


def kinematics(states: Sequence[Union[FilterState, np.ndarray]], entity: int = 0) -> KinematicsSeries:
    """
    Extract velocity and speed from state means.

    Args:
        states: FilterStates or raw state vectors
        entity: Entity index within a stacked state
    """
    if len(states) == 0:
        raise DataError("kinematics needs at least one state")
    block, _ = entity_slices(entity)
    means = np.array([s.Z if isinstance(s, FilterState) else np.asarray(s, dtype=float) for s in states])
    velocity = means[:, block][:, 2:4]
    return KinematicsSeries(velocity=velocity, speed=np.hypot(velocity[:, 0], velocity[:, 1]))


def constant_velocity_baseline(points: np.ndarray) -> np.ndarray:
    """
    Predict x_{t+1} by 2 x_t - x_{t-1}.

    Returns:
        Array aligned with `points`; rows 0 and 1 are NaN (no two past samples)
    """
    points = np.asarray(points, dtype=float)
    baseline = np.full_like(points, np.nan)
    baseline[2:] = 2.0 * points[1:-1] - points[:-2]
    return baseline


def finite_difference_velocity(points: np.ndarray, dt: float = settings.SAMPLE_DT) -> np.ndarray:
    """(x_t - x_{t-1}) / dt; row 0 is NaN."""
    points = np.asarray(points, dtype=float)
    velocity = np.full_like(points, np.nan)
    velocity[1:] = np.diff(points, axis=0) / dt
    return velocity


def rmse(estimate: np.ndarray, truth: np.ndarray) -> float:
    """Root mean squared Euclidean error over rows without NaN."""
    diff = np.asarray(estimate, dtype=float) - np.asarray(truth, dtype=float)
    diff = diff.reshape(diff.shape[0], -1)
    ok = ~np.isnan(diff).any(axis=1)
    if not ok.any():
        return float("nan")
    return float(np.sqrt(np.mean(np.sum(diff[ok] ** 2, axis=1))))


@dataclass(frozen=True)
class CoverageReport:
    """Share of true positions inside their rectangles."""

    n: int
    marginal: float
    joint: float


def rectangle_coverage(predictions: Sequence[Prediction], truths: np.ndarray) -> CoverageReport:
    """
    Empirical rectangle coverage.

    `marginal` is the per-coordinate hit rate, `joint` the rate at which both
    coordinates fall inside at once (near 0.95^2 for independent errors).
    """
    if not len(predictions):
        raise DataError("No predictions to score")
    truths = np.asarray(truths, dtype=float).reshape(len(predictions), -1)
    hits = np.array([p.contains(t) for p, t in zip(predictions, truths)])
    return CoverageReport(n=len(predictions), marginal=float(hits.mean()), joint=float(hits.all(axis=1).mean()))


PREDICTION_COLUMNS = ("t", "horizon", "x", "y", "x_lo", "x_hi", "y_lo", "y_hi")


def prediction_rows(predictions: Sequence[Prediction], origin: int, entity: Optional[int] = None) -> List[dict]:
    """CSV rows for predictions issued after sample `origin`."""
    rows = []
    for p in predictions:
        p = p if entity is None else p.entity(entity)
        x_lo, x_hi, y_lo, y_hi = p.rectangle
        rows.append({
            "t": origin + p.horizon,
            "horizon": p.horizon,
            "x": float(p.mean[0]),
            "y": float(p.mean[1]),
            "x_lo": x_lo,
            "x_hi": x_hi,
            "y_lo": y_lo,
            "y_hi": y_hi,
        })
    return rows
