"""
Newtonian state-space models for Pitch Kinematics.

State per entity is z = (x, y, vx, vy); observations are noisy positions.
Accelerations a_t ~ N(0, Q) drive the finite-difference dynamics

    x_t = x_{t-1} + dt * v_{t-1} + dt^2 / 2 * a_t
    v_t = v_{t-1} + dt * a_t
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel
from scipy.linalg import block_diag

from app.services.errors import ModelError


PARAMS_PER_ENTITY = 6
PARAM_MODES = ("cholesky", "raw")
LOG_FLOOR = -50.0
PSD_SLACK = 1e-10

# Active slots of the 6-slot parameter vector per mode
_ACTIVE_SLOTS = {
    "cholesky": np.arange(5),  # log sx, log sy, log c11, c21, log c22
    "raw": np.arange(6),  # log sx, log sy, q11, q21, q12, q22
}


def _check_mode(mode: str) -> None:
    if mode not in PARAM_MODES:
        raise ModelError(f"Unknown parameterization '{mode}'. Supported: {', '.join(PARAM_MODES)}")


def transition_blocks(dt: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Transition, disturbance loading and observation matrices for one entity.

    Returns:
        (T, R, W) with T = [[I, dt I], [0, I]], R = [[dt^2/2 I], [dt I]], W = [I | 0]
    """
    if dt <= 0:
        raise ModelError(f"dt must be positive, got {dt}")
    eye = np.eye(2)
    zero = np.zeros((2, 2))
    T = np.block([[eye, dt * eye], [zero, eye]])
    R = np.vstack([0.5 * dt ** 2 * eye, dt * eye])
    W = np.hstack([eye, zero])
    return T, R, W


def is_psd(q: np.ndarray, slack: float = PSD_SLACK) -> bool:
    """Symmetric with minimum eigenvalue above -slack (relative to scale)."""
    q = np.asarray(q, dtype=float)
    scale = max(1.0, float(np.abs(q).max(initial=0.0)))
    if not np.allclose(q, q.T, atol=slack * scale, rtol=0.0):
        return False
    return float(np.linalg.eigvalsh(0.5 * (q + q.T)).min()) >= -slack * scale


@dataclass(frozen=True, eq=False)
class SingleEntityModel:
    """State-space model of one entity."""

    dt: float
    T: np.ndarray
    R: np.ndarray
    W: np.ndarray
    Q: np.ndarray
    sigma: np.ndarray
    mode: str = "cholesky"

    state_dim = 4
    obs_dim = 2
    n_entities = 1

    @property
    def H(self) -> np.ndarray:
        """Measurement covariance Diag(sigma_x^2, sigma_y^2)."""
        return np.diag(self.sigma ** 2)

    @property
    def RQR(self) -> np.ndarray:
        return self.R @ self.Q @ self.R.T

    @property
    def entities(self) -> Tuple["SingleEntityModel", ...]:
        return (self,)


def _frozen(array) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def build_single(
    dt: float,
    q: np.ndarray,
    sigma: Sequence[float],
    mode: str = "cholesky",
) -> SingleEntityModel:
    """
    Build the single-entity Newtonian model.

    Args:
        dt: Sampling interval in seconds
        q: 2x2 acceleration covariance, (cm/s^2)^2
        sigma: Measurement noise standard deviations (sigma_x, sigma_y) in cm
        mode: "cholesky" requires a symmetric PSD q; "raw" accepts any q as-is

    Returns:
        SingleEntityModel

    Raises:
        ModelError: Non-PSD q in cholesky mode, nonpositive sigma, bad shapes
    """
    _check_mode(mode)
    q = np.asarray(q, dtype=float)
    sigma = np.asarray(sigma, dtype=float)

    if q.shape != (2, 2) or not np.isfinite(q).all():
        raise ModelError(f"Q must be a finite 2x2 matrix, got shape {q.shape}")
    if sigma.shape != (2,) or not np.isfinite(sigma).all():
        raise ModelError(f"sigma must be a finite pair, got {sigma}")
    if (sigma <= 0).any():
        raise ModelError(f"Measurement standard deviations must be positive, got {sigma}")
    if mode == "cholesky" and not is_psd(q):
        raise ModelError("Q must be symmetric positive semidefinite")

    T, R, W = transition_blocks(dt)
    return SingleEntityModel(
        dt=float(dt),
        T=_frozen(T),
        R=_frozen(R),
        W=_frozen(W),
        Q=_frozen(q),
        sigma=_frozen(sigma),
        mode=mode,
    )


def propagate_state(model: SingleEntityModel, state: np.ndarray, accel: np.ndarray) -> np.ndarray:
    """One Newtonian step: (x + dt v + dt^2/2 a, v + dt a)."""
    return model.T @ np.asarray(state, dtype=float) + model.R @ np.asarray(accel, dtype=float)


@dataclass(frozen=True, eq=False)
class StackedModel:
    """Block-diagonal system of independent entities sharing dt."""

    entities: Tuple[SingleEntityModel, ...]
    dt: float
    T: np.ndarray
    R: np.ndarray
    W: np.ndarray
    Q: np.ndarray
    sigma: np.ndarray

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def state_dim(self) -> int:
        return 4 * self.n_entities

    @property
    def obs_dim(self) -> int:
        return 2 * self.n_entities

    @property
    def H(self) -> np.ndarray:
        return np.diag(self.sigma ** 2)

    @property
    def RQR(self) -> np.ndarray:
        return self.R @ self.Q @ self.R.T


AnyModel = Union[SingleEntityModel, StackedModel]


def stack(models: Sequence[SingleEntityModel]) -> StackedModel:
    """
    Stack entity models into one block-diagonal system, in input order.

    Raises:
        ModelError: Empty input or mismatched dt
    """
    models = tuple(models)
    if not models:
        raise ModelError("Cannot stack an empty sequence of models")
    dts = {m.dt for m in models}
    if len(dts) != 1:
        raise ModelError(f"All stacked models must share dt, got {sorted(dts)}")

    return StackedModel(
        entities=models,
        dt=models[0].dt,
        T=_frozen(block_diag(*(m.T for m in models))),
        R=_frozen(block_diag(*(m.R for m in models))),
        W=_frozen(block_diag(*(m.W for m in models))),
        Q=_frozen(block_diag(*(m.Q for m in models))),
        sigma=_frozen(np.concatenate([m.sigma for m in models])),
    )


def entity_slices(index: int) -> Tuple[slice, slice]:
    """State and observation slices of entity `index` in a stacked system."""
    return slice(4 * index, 4 * index + 4), slice(2 * index, 2 * index + 2)


@dataclass(frozen=True, eq=False)
class ParamVector:
    """
    Unconstrained optimizer coordinates for (Q, sigma), 6 slots per entity.

    cholesky: (log sx, log sy, log c11, c21, log c22, unused), Q = C C^T
    raw:      (log sx, log sy, q11, q21, q12, q22), Q used as-is
    """

    values: np.ndarray
    mode: str = "cholesky"

    def __post_init__(self):
        _check_mode(self.mode)
        values = np.array(self.values, dtype=float).ravel()
        if values.size == 0 or values.size % PARAMS_PER_ENTITY:
            raise ModelError(f"Parameter vector length must be a multiple of {PARAMS_PER_ENTITY}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def active(self) -> np.ndarray:
        """Free coordinates seen by the optimizer (single entity)."""
        return self.values[_ACTIVE_SLOTS[self.mode]].copy()

    def with_active(self, active: np.ndarray) -> "ParamVector":
        values = self.values.copy()
        values[_ACTIVE_SLOTS[self.mode]] = active
        return ParamVector(values=values, mode=self.mode)


def _safe_log(value: float) -> float:
    return float(np.log(value)) if value > np.exp(LOG_FLOOR) else LOG_FLOOR


def encode_params(q: np.ndarray, sigma: Sequence[float], mode: str = "cholesky") -> ParamVector:
    """
    Encode (Q, sigma) into optimizer coordinates.

    Raises:
        ModelError: Non-PSD Q in cholesky mode, nonpositive sigma
    """
    _check_mode(mode)
    q = np.asarray(q, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if (sigma <= 0).any():
        raise ModelError(f"Measurement standard deviations must be positive, got {sigma}")

    values = np.zeros(PARAMS_PER_ENTITY)
    values[0] = np.log(sigma[0])
    values[1] = np.log(sigma[1])

    if mode == "raw":
        values[2:6] = [q[0, 0], q[1, 0], q[0, 1], q[1, 1]]
        return ParamVector(values=values, mode=mode)

    if not is_psd(q):
        raise ModelError("Q must be symmetric positive semidefinite")
    # Cholesky by hand so that singular PSD matrices encode too
    c11 = np.sqrt(max(q[0, 0], 0.0))
    c21 = q[1, 0] / c11 if c11 > 0 else 0.0
    c22 = np.sqrt(max(q[1, 1] - c21 ** 2, 0.0))
    values[2] = _safe_log(c11)
    values[3] = c21
    values[4] = _safe_log(c22)
    return ParamVector(values=values, mode=mode)


def decode_params(p: ParamVector) -> Tuple[np.ndarray, np.ndarray]:
    """
    Decode a single-entity parameter vector into (Q, sigma).

    Any real entries are valid; sigma is always positive and, in cholesky
    mode, Q = C C^T is symmetric PSD.
    """
    if p.values.size != PARAMS_PER_ENTITY:
        raise ModelError("decode_params expects a single-entity vector; use decode_entities")
    v = p.values
    sigma = np.exp(v[0:2])
    if p.mode == "raw":
        q = np.array([[v[2], v[4]], [v[3], v[5]]])
    else:
        c = np.array([[np.exp(v[2]), 0.0], [v[3], np.exp(v[4])]])
        q = c @ c.T
    return q, sigma


def decode_entities(p: ParamVector) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Decode a multi-entity vector into one (Q, sigma) pair per entity."""
    chunks = p.values.reshape(-1, PARAMS_PER_ENTITY)
    return [decode_params(ParamVector(values=chunk, mode=p.mode)) for chunk in chunks]


def model_from_params(dt: float, p: ParamVector) -> SingleEntityModel:
    """Single-entity model for decoded parameters."""
    q, sigma = decode_params(p)
    return build_single(dt, q, sigma, mode=p.mode)


def stacked_model_from_params(dt: float, p: ParamVector) -> StackedModel:
    """Block-diagonal model with one (Q_k, sigma_k) block per entity of `p`."""
    return stack([build_single(dt, q, sigma, mode=p.mode) for q, sigma in decode_entities(p)])


class ModelDocument(BaseModel):
    """JSON form of a single-entity model (matrices row-major)."""

    dt: float
    mode: str
    T: List[List[float]]
    R: List[List[float]]
    W: List[List[float]]
    Q: List[List[float]]
    sigma: List[float]


def model_to_json(model: SingleEntityModel) -> str:
    """Serialize a model to a JSON document."""
    doc = ModelDocument(
        dt=model.dt,
        mode=model.mode,
        T=model.T.tolist(),
        R=model.R.tolist(),
        W=model.W.tolist(),
        Q=model.Q.tolist(),
        sigma=model.sigma.tolist(),
    )
    return doc.model_dump_json(indent=2)


def model_from_json(text: str) -> SingleEntityModel:
    """
    Rebuild a model from its JSON document.

    Raises:
        ModelError: If the stored matrices disagree with the stored dt
    """
    doc = ModelDocument.model_validate_json(text)
    model = build_single(doc.dt, np.array(doc.Q), doc.sigma, mode=doc.mode)
    for name in ("T", "R", "W"):
        if not np.allclose(getattr(model, name), np.array(getattr(doc, name)), atol=1e-12):
            raise ModelError(f"Stored {name} does not match dt={doc.dt}")
    return model
