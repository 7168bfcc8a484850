"""
Maximum-likelihood estimation of the acceleration and measurement covariances.

`fit_mle` maximizes the exact-diffuse log-likelihood of one window with BFGS;
`sliding_window_fit` repeats the fit for every stride-1 window of a series,
filters the window with the fitted model and predicts the sample that follows.
`sliding_window_fit_all` does the same for several entities at once, with one
(Q, sigma) per entity and a single block-diagonal filter pass per window.
"""
import time
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np

from app.config import settings
from app.services.errors import DataError, KinematicsError, ModelError, NumericalError
from app.services.kalman import DiffuseInit, fast_loglik, filter_pass
from app.services.optimizer import minimize_bfgs
from app.services.state_space import (
    AnyModel,
    ParamVector,
    decode_params,
    encode_params,
    model_from_params,
    stacked_model_from_params,
)
from app.services.trajectory_data import TrackingSeries, Window, sliding_windows, stacked_sliding_windows
from app.utils.logger import error_logger, estimation_logger, log_window_fit


EXECUTORS = ("local", "celery")
WARM_START_MARGIN = 1e-6


@dataclass(frozen=True)
class FitConfig:
    """Optimizer and likelihood settings for one fit."""

    mode: str = settings.PARAM_MODE
    gtol: float = settings.BFGS_GTOL
    max_iter: int = settings.BFGS_MAX_ITER
    fd_step: float = settings.FD_STEP
    c1: float = settings.ARMIJO_C1
    shrink: float = settings.ARMIJO_SHRINK
    max_line_steps: int = settings.ARMIJO_MAX_STEPS
    init_mode: str = settings.INIT_MODE
    kappa: float = settings.DEFAULT_KAPPA

    def diffuse_init(self, state_dim: int = 4) -> DiffuseInit:
        return DiffuseInit.diffuse(state_dim, mode=self.init_mode, kappa=self.kappa)

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass(frozen=True, eq=False)
class FitResult:
    """Outcome of one likelihood maximization."""

    params: ParamVector
    loglik: float
    iterations: int
    converged: bool
    gradient_norm: float
    message: str = ""

    def model(self, dt: float):
        return model_from_params(dt, self.params)


@dataclass(frozen=True, eq=False)
class WindowFit:
    """
    Fit of one sliding window.

    The first `window_len` samples are fitted and filtered; `target` is the
    sample after them and `predicted_mean` / `predicted_cov` its one-step
    prediction. Failed windows carry NaN arrays and `fit=None`.
    """

    window_start: int
    fit: Optional[FitResult]
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    predicted_mean: np.ndarray
    predicted_cov: np.ndarray
    target: np.ndarray
    message: str = ""
    duration_ms: float = 0.0

    @property
    def failed(self) -> bool:
        return self.fit is None

    @property
    def target_index(self) -> int:
        return self.window_start + self.filtered_means.shape[0]

    def to_dict(self) -> Dict[str, Any]:
        """Plain-JSON form (used as a Celery task result)."""
        fit = None
        if self.fit is not None:
            fit = {
                "params": self.fit.params.values.tolist(),
                "mode": self.fit.params.mode,
                "loglik": self.fit.loglik,
                "iterations": self.fit.iterations,
                "converged": self.fit.converged,
                "gradient_norm": self.fit.gradient_norm,
                "message": self.fit.message,
            }
        return {
            "window_start": self.window_start,
            "fit": fit,
            "filtered_means": self.filtered_means.tolist(),
            "filtered_covs": self.filtered_covs.tolist(),
            "predicted_mean": self.predicted_mean.tolist(),
            "predicted_cov": self.predicted_cov.tolist(),
            "target": self.target.tolist(),
            "message": self.message,
            "duration_ms": self.duration_ms,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WindowFit":
        fit = data.get("fit")
        if fit is not None:
            fit = FitResult(
                params=ParamVector(values=np.array(fit["params"]), mode=fit["mode"]),
                loglik=fit["loglik"],
                iterations=fit["iterations"],
                converged=fit["converged"],
                gradient_norm=fit["gradient_norm"],
                message=fit.get("message", ""),
            )
        return cls(
            window_start=data["window_start"],
            fit=fit,
            filtered_means=np.array(data["filtered_means"], dtype=float),
            filtered_covs=np.array(data["filtered_covs"], dtype=float),
            predicted_mean=np.array(data["predicted_mean"], dtype=float),
            predicted_cov=np.array(data["predicted_cov"], dtype=float),
            target=np.array(data["target"], dtype=float),
            message=data.get("message", ""),
            duration_ms=data.get("duration_ms", 0.0),
        )


@dataclass(eq=False)
class WindowEstimates:
    """Per-window fits of one series, ordered by window start."""

    entity_id: int
    window_len: int
    dt: float
    windows: List[WindowFit] = field(default_factory=list)

    def __post_init__(self):
        starts = [w.window_start for w in self.windows]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise DataError("Window starts must be strictly increasing")

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def window_starts(self) -> np.ndarray:
        return np.array([w.window_start for w in self.windows], dtype=int)

    @property
    def predictions(self) -> np.ndarray:
        """One-step predicted positions (n, 2)."""
        return np.array([w.predicted_mean[:2] for w in self.windows]).reshape(-1, 2)

    @property
    def targets(self) -> np.ndarray:
        return np.array([w.target for w in self.windows]).reshape(-1, 2)

    @property
    def n_failed(self) -> int:
        return sum(w.failed for w in self.windows)

    @property
    def prediction_rmse(self) -> float:
        """Position RMSE of the one-step predictions over successful windows."""
        ok = np.array([not w.failed for w in self.windows], dtype=bool)
        if not ok.any():
            return float("nan")
        err = self.predictions[ok] - self.targets[ok]
        return float(np.sqrt(np.mean(np.sum(err ** 2, axis=1))))


def default_start(mode: str = settings.PARAM_MODE) -> ParamVector:
    """Cold start Q = START_Q * I, sigma = (START_SIGMA, START_SIGMA)."""
    return encode_params(
        settings.START_Q * np.eye(2),
        (settings.START_SIGMA, settings.START_SIGMA),
        mode=mode,
    )


def _points(window: Union[Window, np.ndarray]) -> np.ndarray:
    points = window.points if isinstance(window, Window) else np.asarray(window, dtype=float)
    return points.reshape(points.shape[0], -1)


def log_likelihood(model: AnyModel, window: Union[Window, np.ndarray], init: Optional[DiffuseInit] = None) -> float:
    """
    Gaussian log-likelihood of a window under `model`.

    l_n = -(m/2) log(2 pi) - 1/2 sum_t (log det F_t + delta_t^T F_t^-1 delta_t),
    summed over non-diffuse steps, m the number of scalar observations they
    contain.

    Raises:
        NumericalError: Singular innovation covariance
    """
    points = _points(window)
    init = init or DiffuseInit.diffuse(model.state_dim)
    if model.n_entities == 1 and not np.isnan(points).any():
        return fast_loglik(model, points, init)
    return filter_pass(model, points, init).loglik


def fit_mle(
    window: Union[Window, np.ndarray],
    dt: float = settings.SAMPLE_DT,
    start: Optional[ParamVector] = None,
    config: Optional[FitConfig] = None,
) -> FitResult:
    """
    Maximize the window log-likelihood over (Q, sigma).

    Args:
        window: Gap-free single-entity window (at least MIN_WINDOW_LENGTH samples)
        dt: Sampling interval in seconds
        start: Starting parameters (cold start when omitted)
        config: Optimizer settings

    Returns:
        FitResult at the best parameters seen

    Raises:
        DataError: Window too short, not gap-free or not two-dimensional
        NumericalError: Likelihood not finite at the starting parameters
    """
    config = config or FitConfig()
    points = _points(window)
    if points.shape[1] != 2:
        raise DataError(f"fit_mle expects a single-entity window, got {points.shape[1]} columns")
    if points.shape[0] < settings.MIN_WINDOW_LENGTH:
        raise DataError(f"Window has {points.shape[0]} samples; at least {settings.MIN_WINDOW_LENGTH} are required")
    if np.isnan(points).any():
        raise DataError("Window contains missing samples")

    start = start or default_start(config.mode)
    if start.mode != config.mode:
        start = encode_params(*decode_params(start), mode=config.mode)
    init = config.diffuse_init()

    def objective(active: np.ndarray) -> float:
        try:
            model = model_from_params(dt, start.with_active(active))
            return -fast_loglik(model, points, init)
        except (ModelError, NumericalError):
            return np.inf

    result = minimize_bfgs(
        objective,
        start.active,
        gtol=config.gtol,
        max_iter=config.max_iter,
        fd_step=config.fd_step,
        c1=config.c1,
        shrink=config.shrink,
        max_line_steps=config.max_line_steps,
    )
    return FitResult(
        params=start.with_active(result.x),
        loglik=-result.fun,
        iterations=result.iterations,
        converged=result.converged,
        gradient_norm=result.gradient_norm,
        message=result.message,
    )


def _failed_window(window: Window, window_len: int, message: str, duration_ms: float) -> WindowFit:
    return WindowFit(
        window_start=window.start_index,
        fit=None,
        filtered_means=np.full((window_len, 4), np.nan),
        filtered_covs=np.full((window_len, 4, 4), np.nan),
        predicted_mean=np.full(4, np.nan),
        predicted_cov=np.full((4, 4), np.nan),
        target=np.array(window.points[-1]),
        message=message,
        duration_ms=duration_ms,
    )


def fit_window(
    window: Window,
    dt: float = settings.SAMPLE_DT,
    start: Optional[ParamVector] = None,
    config: Optional[FitConfig] = None,
) -> WindowFit:
    """
    Fit the first L samples of an (L+1)-sample window and predict the last.

    Failures are caught and returned as a flagged WindowFit.
    """
    config = config or FitConfig()
    started = time.perf_counter()
    window_len = window.length - 1
    fitted = window.points[:-1]

    try:
        fit = fit_mle(fitted, dt, start=start, config=config)
        result = filter_pass(fit.model(dt), fitted, config.diffuse_init())
    except KinematicsError as e:
        duration_ms = (time.perf_counter() - started) * 1000
        error_logger.error(f"Window {window.start_index} failed: {e}")
        return _failed_window(window, window_len, str(e), duration_ms)

    duration_ms = (time.perf_counter() - started) * 1000
    log_window_fit(window.start_index, fit.iterations, fit.loglik, fit.converged, duration_ms)
    return WindowFit(
        window_start=window.start_index,
        fit=fit,
        filtered_means=result.filtered_means,
        filtered_covs=result.filtered_covs,
        predicted_mean=result.predicted[-1].Z,
        predicted_cov=result.predicted[-1].P,
        target=np.array(window.points[-1]),
        message=fit.message,
        duration_ms=duration_ms,
    )


def _fit_local(windows: List[Window], dt: float, config: FitConfig, warm_start: bool) -> List[WindowFit]:
    """
    Fit windows in order. With `warm_start`, each window is also fitted from
    the previous optimum; that fit replaces the cold one only when its
    log-likelihood is higher by more than WARM_START_MARGIN, so a warm run
    never lands on a worse optimum than the cold run.
    """
    fits = []
    previous: Optional[ParamVector] = None
    for window in windows:
        fit = fit_window(window, dt, config=config)
        if warm_start and previous is not None:
            warm = fit_window(window, dt, start=previous, config=config)
            if not warm.failed and (fit.failed or warm.fit.loglik > fit.fit.loglik + WARM_START_MARGIN):
                fit = warm
        if warm_start and fit.fit is not None:
            previous = fit.fit.params
        fits.append(fit)
    return fits


def _fit_celery(windows: List[Window], dt: float, config: FitConfig) -> List[WindowFit]:
    from celery import group
    from app.workers.celery_worker import fit_window_task

    job = group([
        fit_window_task.s(window.start_index, window.points.tolist(), dt, config.to_dict())
        for window in windows
    ])
    pending = job.apply_async()
    fits = [WindowFit.from_dict(r.get()) for r in pending.results]
    return sorted(fits, key=lambda w: w.window_start)


def sliding_window_fit(
    series: TrackingSeries,
    window_len: int = settings.WINDOW_LENGTH,
    config: Optional[FitConfig] = None,
    warm_start: bool = settings.WARM_START,
    executor: str = settings.FIT_EXECUTOR,
) -> WindowEstimates:
    """
    Fit every stride-1 window of `window_len` samples and predict the next.

    An n-sample gap-free series yields n - window_len windows. Windows whose
    fit fails are flagged in the result and the run continues.

    Args:
        series: Tracking series of one entity
        window_len: Samples fitted per window
        config: Optimizer settings
        warm_start: Start each window from the previous optimum (local only)
        executor: "local" or "celery"

    Returns:
        WindowEstimates ordered by window start

    Raises:
        DataError: Bad window length or no gap-free stretch of window_len + 1
    """
    config = config or FitConfig()
    if executor not in EXECUTORS:
        raise DataError(f"Unknown executor '{executor}'. Supported: {', '.join(EXECUTORS)}")
    if window_len < settings.MIN_WINDOW_LENGTH:
        raise DataError(f"Window length {window_len} below minimum {settings.MIN_WINDOW_LENGTH}")
    if warm_start and executor != "local":
        raise DataError("Warm start requires the local executor")

    windows = sliding_windows(series, window_len + 1)
    if not windows:
        raise DataError(f"Entity {series.entity_id} has no gap-free stretch of {window_len + 1} samples")

    estimation_logger.info(
        f"Fitting {len(windows)} windows of entity {series.entity_id} ({executor})",
        extra={"entity_id": series.entity_id},
    )
    if executor == "celery":
        fits = _fit_celery(windows, series.dt, config)
    else:
        fits = _fit_local(windows, series.dt, config, warm_start)

    estimates = WindowEstimates(entity_id=series.entity_id, window_len=window_len, dt=series.dt, windows=fits)
    if estimates.n_failed:
        estimation_logger.warning(f"{estimates.n_failed} of {len(estimates)} windows failed")
    return estimates


@dataclass(frozen=True, eq=False)
class StackedWindowFit:
    """
    Fit of one window across several entities.

    Every entity gets its own (Q_k, sigma_k); `params` holds them in entity
    order. The block-diagonal model filters the first `window_len` rows and
    `predicted_mean` / `predicted_cov` forecast the row after them.
    """

    window_start: int
    params: Optional[ParamVector]
    entity_fits: Tuple[FitResult, ...]
    loglik: float
    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    predicted_mean: np.ndarray
    predicted_cov: np.ndarray
    target: np.ndarray
    message: str = ""
    duration_ms: float = 0.0

    @property
    def failed(self) -> bool:
        return self.params is None

    @property
    def n_entities(self) -> int:
        return self.target.size // 2

    def model(self, dt: float):
        return stacked_model_from_params(dt, self.params)


@dataclass(eq=False)
class StackedWindowEstimates:
    """Per-window fits of several entities, ordered by window start."""

    entity_ids: Tuple[int, ...]
    window_len: int
    dt: float
    windows: List[StackedWindowFit] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.windows)

    @property
    def window_starts(self) -> np.ndarray:
        return np.array([w.window_start for w in self.windows], dtype=int)

    @property
    def predictions(self) -> np.ndarray:
        """One-step predicted positions (n, entities, 2)."""
        k = len(self.entity_ids)
        return np.array([w.predicted_mean.reshape(k, 4)[:, :2] for w in self.windows]).reshape(-1, k, 2)

    @property
    def targets(self) -> np.ndarray:
        return np.array([w.target for w in self.windows]).reshape(-1, len(self.entity_ids), 2)

    @property
    def n_failed(self) -> int:
        return sum(w.failed for w in self.windows)

    @property
    def prediction_rmse(self) -> float:
        """Position RMSE over every entity of the successful windows."""
        ok = np.array([not w.failed for w in self.windows], dtype=bool)
        if not ok.any():
            return float("nan")
        err = self.predictions[ok] - self.targets[ok]
        return float(np.sqrt(np.mean(np.sum(err ** 2, axis=2))))


def fit_stacked_window(
    window: Window,
    dt: float = settings.SAMPLE_DT,
    config: Optional[FitConfig] = None,
) -> StackedWindowFit:
    """
    Fit each entity of an (L+1)-row stacked window and predict the last row.

    The stacked log-likelihood is the sum of the entity log-likelihoods, so
    each (Q_k, sigma_k) is maximized on its own columns. A failure of any
    entity flags the whole window.
    """
    config = config or FitConfig()
    started = time.perf_counter()
    fitted = window.points[:-1]
    window_len, n_entities = fitted.shape[0], fitted.shape[1] // 2

    try:
        columns = [np.ascontiguousarray(fitted[:, 2 * k:2 * k + 2]) for k in range(n_entities)]
        fits = tuple(fit_mle(points, dt, config=config) for points in columns)
        params = ParamVector(values=np.concatenate([f.params.values for f in fits]), mode=config.mode)
        result = filter_pass(stacked_model_from_params(dt, params), fitted, config.diffuse_init(4 * n_entities))
    except KinematicsError as e:
        error_logger.error(f"Stacked window {window.start_index} failed: {e}")
        return StackedWindowFit(
            window_start=window.start_index,
            params=None,
            entity_fits=(),
            loglik=float("nan"),
            filtered_means=np.full((window_len, 4 * n_entities), np.nan),
            filtered_covs=np.full((window_len, 4 * n_entities, 4 * n_entities), np.nan),
            predicted_mean=np.full(4 * n_entities, np.nan),
            predicted_cov=np.full((4 * n_entities, 4 * n_entities), np.nan),
            target=np.array(window.points[-1]),
            message=str(e),
            duration_ms=(time.perf_counter() - started) * 1000,
        )

    duration_ms = (time.perf_counter() - started) * 1000
    converged = all(f.converged for f in fits)
    log_window_fit(window.start_index, sum(f.iterations for f in fits), result.loglik, converged, duration_ms)
    return StackedWindowFit(
        window_start=window.start_index,
        params=params,
        entity_fits=fits,
        loglik=result.loglik,
        filtered_means=result.filtered_means,
        filtered_covs=result.filtered_covs,
        predicted_mean=result.predicted[-1].Z,
        predicted_cov=result.predicted[-1].P,
        target=np.array(window.points[-1]),
        duration_ms=duration_ms,
    )


def sliding_window_fit_all(
    series: Iterable[TrackingSeries],
    window_len: int = settings.ALL_ENTITY_WINDOW_LENGTH,
    config: Optional[FitConfig] = None,
) -> StackedWindowEstimates:
    """
    Fit every stride-1 window of several entities at once and predict the next row.

    Only rows where every entity was observed take part in windows.

    Raises:
        DataError: Bad window length, series that cannot be stacked or no
            common gap-free stretch of window_len + 1
    """
    config = config or FitConfig()
    series = list(series)
    if window_len < settings.MIN_WINDOW_LENGTH:
        raise DataError(f"Window length {window_len} below minimum {settings.MIN_WINDOW_LENGTH}")

    windows = stacked_sliding_windows(series, window_len + 1)
    entity_ids = tuple(s.entity_id for s in series)
    if not windows:
        raise DataError(f"Entities {list(entity_ids)} share no gap-free stretch of {window_len + 1} samples")

    estimation_logger.info(
        f"Fitting {len(windows)} stacked windows of {len(entity_ids)} entities",
        extra={"entity_count": len(entity_ids)},
    )
    dt = series[0].dt
    estimates = StackedWindowEstimates(
        entity_ids=entity_ids,
        window_len=window_len,
        dt=dt,
        windows=[fit_stacked_window(w, dt, config) for w in windows],
    )
    if estimates.n_failed:
        estimation_logger.warning(f"{estimates.n_failed} of {len(estimates)} stacked windows failed")
    return estimates


ESTIMATE_COLUMNS = ("window_start", "loglik", "sigma_x", "sigma_y", "q11", "q21", "q12", "q22", "converged")
STACKED_ESTIMATE_COLUMNS = ("window_start", "entity") + ESTIMATE_COLUMNS[1:]


def _fit_columns(fit: Optional[FitResult]) -> Dict[str, Any]:
    if fit is None:
        q, sigma, loglik, converged = np.full((2, 2), np.nan), np.full(2, np.nan), np.nan, False
    else:
        q, sigma = decode_params(fit.params)
        loglik, converged = fit.loglik, fit.converged
    return {
        "loglik": loglik,
        "sigma_x": sigma[0],
        "sigma_y": sigma[1],
        "q11": q[0, 0],
        "q21": q[1, 0],
        "q12": q[0, 1],
        "q22": q[1, 1],
        "converged": converged,
    }


def estimate_rows(estimates: WindowEstimates) -> List[Dict[str, Any]]:
    """Rows of the per-window parameter table."""
    return [{"window_start": w.window_start, **_fit_columns(w.fit)} for w in estimates.windows]


def stacked_estimate_rows(estimates: StackedWindowEstimates) -> List[Dict[str, Any]]:
    """One row per window and entity; `loglik` is the entity's share."""
    rows = []
    for w in estimates.windows:
        for k, entity_id in enumerate(estimates.entity_ids):
            fit = None if w.failed else w.entity_fits[k]
            rows.append({"window_start": w.window_start, "entity": entity_id, **_fit_columns(fit)})
    return rows
