"""
Synthetic ground truth for Pitch Kinematics.

Simulation of the state-space model, a brute-force joint-Gaussian
conditioning oracle, and scripted trajectory shapes for VAE training.

Random numbers come from numpy's PCG64 bit generator; Gaussian draws use the
Box-Muller transform on its uniforms so a seed reproduces across platforms.
"""
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import multivariate_normal

from app.config import settings
from app.services.errors import DataError, ModelError, NumericalError
from app.services.state_space import AnyModel, is_psd
from app.services.trajectory_data import (
    FieldSpec,
    TrackingSeries,
    normalize_points,
)
from app.utils.logger import error_logger


ORACLE_MAX_STEPS = 15
SHAPES = ("line", "loop", "sprint-and-loop")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def noise_streams(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    """Independent (acceleration, measurement) generators derived from one seed."""
    accel, measurement = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.PCG64(accel)), np.random.Generator(np.random.PCG64(measurement))


def box_muller(rng: np.random.Generator, shape) -> np.ndarray:
    """
    Standard normal draws by the Box-Muller transform.

    Pairs (u1, u2) of uniforms give r cos(2 pi u2) for the first half of the
    output and r sin(2 pi u2) for the second, r = sqrt(-2 log u1).
    """
    shape = (shape,) if np.isscalar(shape) else tuple(shape)
    count = int(np.prod(shape))
    half = (count + 1) // 2
    u1 = 1.0 - rng.random(half)  # (0, 1]
    u2 = rng.random(half)
    r = np.sqrt(-2.0 * np.log(u1))
    draws = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])
    return draws[:count].reshape(shape)


def _covariance_factor(cov: np.ndarray) -> np.ndarray:
    """L with L L^T = cov, valid for singular PSD matrices."""
    eigval, eigvec = np.linalg.eigh(0.5 * (cov + cov.T))
    return eigvec * np.sqrt(np.clip(eigval, 0.0, None))


@dataclass(frozen=True, eq=False)
class SyntheticScenario:
    """Simulated states z_1..z_n and their noisy position observations."""

    model: AnyModel
    n: int
    seed: int
    truth: np.ndarray
    observations: np.ndarray
    init_state: np.ndarray

    def to_series(self, entity_ids: Optional[Sequence[int]] = None) -> Dict[int, TrackingSeries]:
        """Observations split per entity, ready for the tracking CSV writer."""
        k = self.model.n_entities
        entity_ids = list(entity_ids) if entity_ids is not None else list(range(1, k + 1))
        if len(entity_ids) != k:
            raise DataError(f"Expected {k} entity ids, got {len(entity_ids)}")
        return {
            entity_id: TrackingSeries(
                entity_id=entity_id,
                samples=self.observations[:, 2 * i:2 * i + 2],
                dt=self.model.dt,
            )
            for i, entity_id in enumerate(entity_ids)
        }


def simulate(
    model: AnyModel,
    n: int,
    seed: int = 0,
    init_state: Optional[np.ndarray] = None,
    measurement_noise: bool = True,
) -> SyntheticScenario:
    """
    Draw a trajectory from the model.

    z_t = T z_{t-1} + R a_t with a_t ~ N(0, Q), starting from z_0 = init_state,
    and eta_t = W z_t + e_t with e_t ~ N(0, Sigma). All accelerations are drawn
    before any measurement noise, each from its own stream of `seed`.

    Args:
        model: Single-entity or stacked model
        n: Number of steps (>= 1)
        seed: Random seed
        init_state: z_0 (zeros when omitted)
        measurement_noise: False observes W z_t exactly

    Raises:
        DataError: n < 1 or wrong init_state shape
        ModelError: Q not symmetric PSD
    """
    if n < 1:
        raise DataError(f"Number of steps must be at least 1, got {n}")
    if not is_psd(model.Q):
        raise ModelError("Simulation requires a symmetric positive semidefinite Q")

    z = np.zeros(model.state_dim) if init_state is None else np.asarray(init_state, dtype=float).copy()
    if z.shape != (model.state_dim,):
        raise DataError(f"init_state must have {model.state_dim} components")
    init = z.copy()

    accel_rng, noise_rng = noise_streams(seed)
    m = model.Q.shape[0]
    accels = box_muller(accel_rng, (n, m)) @ _covariance_factor(model.Q).T
    noise = box_muller(noise_rng, (n, model.obs_dim)) * model.sigma

    truth = np.empty((n, model.state_dim))
    for t in range(n):
        z = model.T @ z + model.R @ accels[t]
        truth[t] = z
    observations = truth @ model.W.T
    if measurement_noise:
        observations = observations + noise

    return SyntheticScenario(model=model, n=n, seed=seed, truth=truth, observations=observations, init_state=init)


@dataclass(frozen=True, eq=False)
class OracleResult:
    """Exact filtered moments and joint log-density from direct conditioning."""

    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    log_density: float


def _check_conditioning(S: np.ndarray, t: int) -> None:
    eig = np.linalg.eigvalsh(S)
    if eig[0] <= 0 or eig[-1] / eig[0] > settings.SINGULAR_CONDITION:
        error_logger.error(f"Oracle joint covariance singular at step {t}: min eigenvalue {eig[0]}")
        raise NumericalError("Joint observation covariance is numerically singular", module="synthetic", step=t)


def conditioning_oracle(
    model: AnyModel,
    observations: np.ndarray,
    prior: Tuple[np.ndarray, np.ndarray],
) -> OracleResult:
    """
    Filtered moments by explicit joint-Gaussian conditioning.

    Builds the covariance of all states and observations of a short window,
    Cov(z_t, z_s) = T^(t-s) V_s for t >= s with V_{t+1} = T V_t T^T + R Q R^T,
    and conditions z_t on eta_1..eta_t directly.

    Args:
        model: State-space model
        observations: (n, p) gap-free observations, n <= 15
        prior: (mean, cov) of z_1, proper

    Returns:
        OracleResult with E[z_t | eta_1..eta_t], Var[z_t | eta_1..eta_t] and
        log p(eta_1..eta_n)

    Raises:
        DataError: Too many steps, missing values or shape mismatch
        NumericalError: Joint covariance numerically singular
    """
    y = np.asarray(observations, dtype=float)
    y = y.reshape(y.shape[0], -1)
    n, p = y.shape
    s = model.state_dim
    if n < 1 or n > ORACLE_MAX_STEPS:
        raise DataError(f"Oracle supports 1 to {ORACLE_MAX_STEPS} steps, got {n}")
    if p != model.obs_dim:
        raise DataError(f"Observations have {p} columns, model expects {model.obs_dim}")
    if np.isnan(y).any():
        raise DataError("Oracle requires gap-free observations")

    mean0, cov0 = np.asarray(prior[0], dtype=float), np.asarray(prior[1], dtype=float)
    T, W, H, RQR = model.T, model.W, model.H, model.RQR

    means = np.empty((n, s))
    marginal = np.empty((n, s, s))
    means[0], marginal[0] = mean0, cov0
    for t in range(1, n):
        means[t] = T @ means[t - 1]
        marginal[t] = T @ marginal[t - 1] @ T.T + RQR

    # cross[t][r] = Cov(z_t, z_r)
    cross = np.empty((n, n, s, s))
    for r in range(n):
        cross[r, r] = marginal[r]
        for t in range(r + 1, n):
            cross[t, r] = T @ cross[t - 1, r]
            cross[r, t] = cross[t, r].T

    S = np.empty((n * p, n * p))
    for t in range(n):
        for r in range(n):
            block = W @ cross[t, r] @ W.T
            if t == r:
                block = block + H
            S[t * p:(t + 1) * p, r * p:(r + 1) * p] = block
    S = 0.5 * (S + S.T)
    mu_y = (means @ W.T).ravel()
    y_flat = y.ravel()

    filtered_means = np.empty((n, s))
    filtered_covs = np.empty((n, s, s))
    for t in range(n):
        m = (t + 1) * p
        S_t = S[:m, :m]
        _check_conditioning(S_t, t + 1)
        C = np.hstack([cross[t, r] @ W.T for r in range(t + 1)])
        try:
            chol = cho_factor(S_t, lower=True)
        except LinAlgError as exc:
            error_logger.error(f"Oracle Cholesky failed at step {t + 1}: {exc}")
            raise NumericalError("Joint observation covariance is not positive definite", module="synthetic", step=t + 1) from exc
        filtered_means[t] = means[t] + C @ cho_solve(chol, y_flat[:m] - mu_y[:m])
        cov = marginal[t] - C @ cho_solve(chol, C.T)
        filtered_covs[t] = 0.5 * (cov + cov.T)

    log_density = float(multivariate_normal(mean=mu_y, cov=S).logpdf(y_flat))
    return OracleResult(filtered_means=filtered_means, filtered_covs=filtered_covs, log_density=log_density)


def _step_count(duration: float, dt: float) -> int:
    n = int(round(duration / dt))
    if n < 2 or abs(n * dt - duration) > 1e-9 * max(1.0, duration):
        raise DataError(f"Duration {duration} s must be a multiple of dt={dt} covering at least 2 samples")
    return n


def _line(rng: np.random.Generator, n: int, dt: float) -> np.ndarray:
    speed = rng.uniform(150.0, 500.0)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    direction = np.array([np.cos(heading), np.sin(heading)])
    return np.outer(np.arange(n) * speed * dt, direction)


def _circle(n: int, radius: float, phase: float, turns: float, clockwise: bool) -> np.ndarray:
    sign = -1.0 if clockwise else 1.0
    angles = phase + sign * 2.0 * np.pi * turns * np.arange(n) / (n - 1)
    return radius * np.column_stack([np.cos(angles), np.sin(angles)])


def _loop(rng: np.random.Generator, n: int, dt: float) -> np.ndarray:
    speed = rng.uniform(150.0, 400.0)
    radius = speed * (n - 1) * dt / (2.0 * np.pi)
    circle = _circle(n, radius, rng.uniform(0.0, 2.0 * np.pi), 1.0, bool(rng.integers(2)))
    return circle - circle[0]


def _sprint_and_loop(rng: np.random.Generator, n: int, dt: float) -> np.ndarray:
    n_sprint = max(2, int(round(0.2 * n)))
    n_loop = n - n_sprint
    if n_loop < 2:
        raise DataError("sprint-and-loop needs at least 4 samples")

    sprint_speed = rng.uniform(600.0, 800.0)
    loop_speed = rng.uniform(200.0, 350.0)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    u = np.array([np.cos(heading), np.sin(heading)])
    normal = np.array([-u[1], u[0]])

    sprint = np.outer(np.arange(n_sprint) * sprint_speed * dt, u)
    entry = sprint[-1] + sprint_speed * dt * u

    # two loops, entered tangentially and turning towards `normal`
    radius = loop_speed * (n_loop - 1) * dt / (4.0 * np.pi)
    center = entry + radius * normal
    phase = np.arctan2(*(entry - center)[::-1])
    loop = center + _circle(n_loop, radius, phase, 2.0, clockwise=False)
    return np.vstack([sprint, loop])


_BUILDERS = {
    "line": _line,
    "loop": _loop,
    "sprint-and-loop": _sprint_and_loop,
}


def _fit_into_field(path: np.ndarray, field: FieldSpec, rng: np.random.Generator) -> np.ndarray:
    """Shrink the path if it exceeds 90% of the field, then place it at random inside."""
    lower, upper = path.min(axis=0), path.max(axis=0)
    span = upper - lower
    room = 0.9 * field.extent
    scale = min(1.0, float(np.min(room / np.maximum(span, 1e-12))))
    path = (path - lower) * scale
    span = span * scale
    slack = field.extent - span
    offset = field.lower + slack * rng.uniform(0.05, 0.95, size=2)
    return path + offset


def scripted_trajectory(
    shape: str,
    duration: float,
    seed: int = 0,
    dt: float = settings.SAMPLE_DT,
    jitter: float = 0.0,
    field: Optional[FieldSpec] = None,
    entity_id: int = 1,
) -> TrackingSeries:
    """
    Smooth parametric path inside the field.

    Args:
        shape: "line", "loop" (one closed circle) or "sprint-and-loop"
            (straight sprint over the first fifth, then two slower loops)
        duration: Seconds; must be a multiple of dt
        seed: Seed for geometry and jitter
        dt: Sampling interval
        jitter: Standard deviation (cm) of additive Gaussian noise
        field: Pitch bounds
        entity_id: Id stored on the returned series

    Returns:
        TrackingSeries of round(duration / dt) samples
    """
    if shape not in _BUILDERS:
        raise DataError(f"Unknown shape '{shape}'. Supported: {', '.join(SHAPES)}")
    if jitter < 0:
        raise DataError(f"Jitter must be nonnegative, got {jitter}")
    field = field or FieldSpec()
    n = _step_count(duration, dt)
    rng = make_rng(seed)

    path = _fit_into_field(_BUILDERS[shape](rng, n, dt), field, rng)
    if jitter > 0:
        path = path + jitter * box_muller(rng, path.shape)
    return TrackingSeries(entity_id=entity_id, samples=path, dt=dt)


def trajectory_dataset(
    count: int,
    duration: float,
    seed: int = 0,
    dt: float = settings.SAMPLE_DT,
    jitter: float = 0.0,
    shapes: Sequence[str] = SHAPES,
    field: Optional[FieldSpec] = None,
) -> np.ndarray:
    """
    Normalized scripted trajectories, one flattened row (x1, y1, x2, y2, ...) each.

    Shapes cycle in the given order; row i uses a seed derived from (seed, i).

    Returns:
        Array (count, 2 * round(duration / dt)) in [0, 1]
    """
    if count < 1:
        raise DataError(f"Dataset needs at least one trajectory, got {count}")
    field = field or FieldSpec()
    seeds = np.random.SeedSequence(seed).generate_state(count)
    rows = []
    for i in range(count):
        series = scripted_trajectory(shapes[i % len(shapes)], duration, int(seeds[i]), dt=dt, jitter=jitter, field=field)
        rows.append(normalize_points(series.samples, field, clip=True).ravel())
    return np.array(rows)
