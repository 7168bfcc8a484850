"""
Celery worker tasks for Pitch Kinematics.
One task fits one sliding window; results travel as plain dicts.
"""
import time
from typing import Any, Dict, List, Optional

import numpy as np
from celery import Task
from celery.utils.log import get_task_logger

from app.workers.celery_app import celery_app
from app.services.estimation import FitConfig, fit_window
from app.services.trajectory_data import Window

# Celery task logger
logger = get_task_logger(__name__)


class WindowFitTask(Task):
    """Base class for window-fit tasks with failure logging."""

    def on_failure(self, exc, task_id, args, kwargs, einfo):
        """Handle task failure."""
        logger.error(f"Task {task_id} failed: {exc}")

    def on_success(self, retval, task_id, args, kwargs):
        """Handle task success."""
        logger.debug(f"Task {task_id} fitted window {retval.get('window_start')}")


@celery_app.task(
    base=WindowFitTask,
    bind=True,
    name='app.workers.celery_worker.fit_window_task',
)
def fit_window_task(
    self,
    window_start: int,
    points: List[List[float]],
    dt: float,
    config: Optional[Dict[str, Any]] = None,
) -> Dict[str, Any]:
    """
    Fit one (L+1)-sample window and predict its last sample.

    Args:
        window_start: Index of the window's first sample in the series
        points: Window samples as [[x, y], ...]
        dt: Sampling interval in seconds
        config: FitConfig fields (defaults when omitted)

    Returns:
        WindowFit as a dict; failed fits come back flagged, not raised
    """
    start_time = time.time()
    window = Window(start_index=window_start, points=np.array(points, dtype=float))
    result = fit_window(window, dt, config=FitConfig(**(config or {})))

    duration_ms = (time.time() - start_time) * 1000
    logger.info(f"Window {window_start} done in {duration_ms:.1f}ms (failed={result.failed})")
    return result.to_dict()
