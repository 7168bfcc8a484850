"""Shared fixtures for the Pitch Kinematics test suite."""
import numpy as np
import pytest

from app.services.state_space import build_single
from app.services.synthetic import simulate
from app.services.trajectory_data import serialize_tracking_csv


DT = 0.1


@pytest.fixture
def unit_model():
    """Unit-scaled model: Q = I, sigma = (1, 1)."""
    return build_single(DT, np.eye(2), (1.0, 1.0))


@pytest.fixture
def pitch_model():
    """Field-scale model: Q = diag(400, 400) (cm/s^2)^2, sigma = (10, 10) cm."""
    return build_single(DT, 400.0 * np.eye(2), (10.0, 10.0))


@pytest.fixture
def random_unit_model():
    """Factory for random unit-scaled models with a PSD Q."""

    def make(rng: np.random.Generator):
        a = rng.normal(size=(2, 2))
        q = a @ a.T + 0.1 * np.eye(2)
        sigma = rng.uniform(0.5, 2.0, size=2)
        return build_single(DT, q, sigma)

    return make


@pytest.fixture
def center_state():
    """Player at the centre spot running at (300, 0) cm/s."""
    return np.array([0.0, 0.0, 300.0, 0.0])


@pytest.fixture
def tracking_csv(tmp_path, pitch_model, center_state):
    """CSV of a 40-sample simulated run for entity 1."""
    scenario = simulate(pitch_model, 40, seed=3, init_state=center_state)
    path = tmp_path / "track.csv"
    path.write_text(serialize_tracking_csv(scenario.to_series([1])))
    return path


@pytest.fixture
def eager_celery():
    """Run Celery tasks in-process."""
    from app.workers.celery_app import celery_app

    previous = (celery_app.conf.task_always_eager, celery_app.conf.task_eager_propagates)
    celery_app.conf.task_always_eager = True
    celery_app.conf.task_eager_propagates = True
    yield celery_app
    celery_app.conf.task_always_eager, celery_app.conf.task_eager_propagates = previous
