"""
Kalman recursions for Pitch Kinematics.

One step maps the one-step prediction (Z_t, P_t) and the observation eta_t to
the next prediction

    Z_{t+1} = T (Z_t + K_t F_t^-1 delta_t)
    P_{t+1} = T (P_t - K_t F_t^-1 K_t^T) T^T + R Q R^T

with delta_t = eta_t - W Z_t, F_t = W P_t W^T + Sigma and K_t = P_t W^T.
Missing observation components (NaN) are dropped from the update; a step
without any observation is a pure prediction.

Initialization is exact diffuse by default: P_1 = P_star + kappa * P_inf with
kappa -> infinity, carried as two matrices until P_inf is depleted. The
large-kappa approximation (Joseph-form updates) is kept for cross-checks.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from app.config import settings
from app.services.errors import DataError, NumericalError
from app.services.state_space import AnyModel, SingleEntityModel
from app.services.trajectory_data import Window
from app.utils.logger import error_logger


INIT_MODES = ("exact-diffuse", "large-kappa")
LOG_2PI = float(np.log(2.0 * np.pi))


def _symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _is_negligible(m: Optional[np.ndarray]) -> bool:
    return m is None or float(np.abs(m).max(initial=0.0)) <= settings.DIFFUSE_TOLERANCE


@dataclass(frozen=True, eq=False)
class FilterState:
    """One-step prediction (Z_t, P_t); P_inf is the diffuse part, if any."""

    Z: np.ndarray
    P: np.ndarray
    t: int
    P_inf: Optional[np.ndarray] = None

    @property
    def diffuse(self) -> bool:
        return not _is_negligible(self.P_inf)


@dataclass(frozen=True, eq=False)
class InnovationRecord:
    """Innovation quantities of one step plus the updated state E[z_t | eta_1..eta_t]."""

    t: int
    delta: np.ndarray
    F: np.ndarray
    K: np.ndarray
    observed: np.ndarray
    diffuse: bool
    filtered: FilterState


@dataclass(frozen=True)
class LoglikTerm:
    """
    Likelihood contribution of one step.

    `logdet`, `quad` and `n_obs` cover the non-diffuse observed components;
    `diffuse_logdet` collects the excluded diffuse-phase terms.
    """

    t: int
    logdet: float
    quad: float
    n_obs: int
    diffuse: bool = False
    diffuse_logdet: float = 0.0

    @property
    def value(self) -> float:
        return -0.5 * (self.n_obs * LOG_2PI + self.logdet + self.quad)


@dataclass(frozen=True, eq=False)
class DiffuseInit:
    """Initial state distribution N(mean, P_star + kappa * P_inf)."""

    mean: np.ndarray
    P_star: np.ndarray
    P_inf: np.ndarray
    mode: str = "exact-diffuse"
    kappa: float = settings.DEFAULT_KAPPA

    def __post_init__(self):
        if self.mode not in INIT_MODES:
            raise DataError(f"Unknown initialization mode '{self.mode}'")
        if self.mode == "large-kappa" and self.kappa <= 0:
            raise DataError(f"kappa must be positive, got {self.kappa}")

    @classmethod
    def diffuse(cls, state_dim: int, mode: str = "exact-diffuse", kappa: float = settings.DEFAULT_KAPPA) -> "DiffuseInit":
        """Fully diffuse prior: zero mean, P_star = 0, P_inf = I."""
        return cls(
            mean=np.zeros(state_dim),
            P_star=np.zeros((state_dim, state_dim)),
            P_inf=np.eye(state_dim),
            mode=mode,
            kappa=kappa,
        )

    @classmethod
    def proper(cls, mean: np.ndarray, cov: np.ndarray) -> "DiffuseInit":
        """Proper Gaussian prior; no diffuse part."""
        mean = np.asarray(mean, dtype=float)
        return cls(mean=mean, P_star=np.asarray(cov, dtype=float), P_inf=np.zeros((mean.size, mean.size)))

    def initial_state(self) -> FilterState:
        if self.mode == "large-kappa":
            return FilterState(Z=self.mean.copy(), P=self.P_star + self.kappa * self.P_inf, t=1)
        P_inf = None if _is_negligible(self.P_inf) else self.P_inf.copy()
        return FilterState(Z=self.mean.copy(), P=self.P_star.copy(), t=1, P_inf=P_inf)


@dataclass(eq=False)
class FilterPass:
    """
    Output of a filter pass over n observations.

    `predicted[t]` is the prediction for step t+1 given eta_1..eta_t
    (predicted[0] is the initial state); `records[t]` carries the update
    at step t+1.
    """

    predicted: List[FilterState]
    records: List[InnovationRecord]
    loglik_terms: List[LoglikTerm]
    max_inverted_dim: int = 0
    diffuse_flags: List[bool] = field(default_factory=list)

    def __iter__(self):
        return iter((self.predicted, self.records, self.loglik_terms))

    @property
    def loglik(self) -> float:
        return loglik_from_terms(self.loglik_terms)

    @property
    def n_diffuse(self) -> int:
        return sum(self.diffuse_flags)

    @property
    def filtered_means(self) -> np.ndarray:
        return np.array([r.filtered.Z for r in self.records])

    @property
    def filtered_covs(self) -> np.ndarray:
        return np.array([r.filtered.P for r in self.records])

    @property
    def predicted_means(self) -> np.ndarray:
        return np.array([s.Z for s in self.predicted])

    @property
    def predicted_covs(self) -> np.ndarray:
        return np.array([s.P for s in self.predicted])


def loglik_from_terms(terms: List[LoglikTerm]) -> float:
    """l_n = -(m/2) log 2pi - 1/2 sum(log det F_t + delta_t^T F_t^-1 delta_t), diffuse terms excluded."""
    return float(sum(term.value for term in terms))


def _check_innovation_cov(F: np.ndarray, t: int) -> None:
    eig = np.linalg.eigvalsh(F)
    if eig[0] <= 0 or eig[-1] / eig[0] > settings.SINGULAR_CONDITION:
        error_logger.error(f"Singular innovation covariance at step {t}: eigenvalues {eig}")
        raise NumericalError("Innovation covariance F_t is numerically singular", module="kalman", step=t)


def _predict(model: AnyModel, a: np.ndarray, P: np.ndarray, P_inf: Optional[np.ndarray], t: int) -> FilterState:
    T = model.T
    Z_next = T @ a
    P_next = _symmetrize(T @ P @ T.T + model.RQR)
    P_inf_next = None if _is_negligible(P_inf) else _symmetrize(T @ P_inf @ T.T)
    if _is_negligible(P_inf_next):
        P_inf_next = None
    return FilterState(Z=Z_next, P=P_next, t=t + 1, P_inf=P_inf_next)


def _observation(obs: Optional[np.ndarray], obs_dim: int) -> Tuple[np.ndarray, np.ndarray]:
    if obs is None:
        return np.full(obs_dim, np.nan), np.zeros(obs_dim, dtype=bool)
    y = np.asarray(obs, dtype=float).ravel()
    if y.size != obs_dim:
        raise DataError(f"Observation has {y.size} components, model expects {obs_dim}")
    return y, ~np.isnan(y)


def _scatter(values: np.ndarray, observed: np.ndarray) -> np.ndarray:
    full = np.full(observed.size, np.nan)
    full[observed] = values
    return full


def _sequential_update(
    model: AnyModel,
    a: np.ndarray,
    P: np.ndarray,
    P_inf: Optional[np.ndarray],
    y: np.ndarray,
    observed: np.ndarray,
    t: int,
):
    """
    Process observed components one scalar at a time.

    Returns the updated (a, P, P_inf), scalar innovations and variances, and
    the step's LoglikTerm. No matrix is ever inverted.
    """
    tol = settings.DIFFUSE_TOLERANCE
    a = a.copy()
    P = P.copy()
    P_inf = None if P_inf is None else P_inf.copy()
    sigma2 = model.sigma ** 2

    deltas, variances = [], []
    logdet = quad = diffuse_logdet = 0.0
    n_obs = 0
    any_diffuse = False

    for i in np.flatnonzero(observed):
        w = model.W[i]
        v = y[i] - w @ a
        M = P @ w
        F_star = w @ M + sigma2[i]
        F_inf = 0.0
        if P_inf is not None:
            M_inf = P_inf @ w
            F_inf = w @ M_inf

        if F_inf > tol:
            any_diffuse = True
            a = a + M_inf * (v / F_inf)
            P = P + np.outer(M_inf, M_inf) * (F_star / F_inf ** 2) - (np.outer(M, M_inf) + np.outer(M_inf, M)) / F_inf
            P_inf = P_inf - np.outer(M_inf, M_inf) / F_inf
            diffuse_logdet += np.log(F_inf)
            variances.append(F_inf)
        else:
            if F_star <= 0:
                raise NumericalError("Scalar innovation variance is not positive", module="kalman", step=t)
            a = a + M * (v / F_star)
            P = P - np.outer(M, M) / F_star
            logdet += np.log(F_star)
            quad += v * v / F_star
            n_obs += 1
            variances.append(F_star)
        deltas.append(v)

    term = LoglikTerm(
        t=t, logdet=float(logdet), quad=float(quad), n_obs=n_obs,
        diffuse=any_diffuse, diffuse_logdet=float(diffuse_logdet),
    )
    return a, _symmetrize(P), None if P_inf is None else _symmetrize(P_inf), np.array(deltas), np.array(variances), term


def _record(t, delta, F, K, observed, diffuse, a, P, P_inf) -> InnovationRecord:
    return InnovationRecord(
        t=t, delta=delta, F=F, K=K, observed=observed, diffuse=diffuse,
        filtered=FilterState(Z=a, P=P, t=t, P_inf=None if _is_negligible(P_inf) else P_inf),
    )


def _step_univariate(model: AnyModel, state: FilterState, y: np.ndarray, observed: np.ndarray):
    t = state.t
    a, P, P_inf, deltas, variances, term = _sequential_update(model, state.Z, state.P, state.P_inf, y, observed, t)
    K = state.P @ model.W[observed].T
    record = _record(t, _scatter(deltas, observed), np.diag(variances), K, observed, term.diffuse, a, P, P_inf)
    return _predict(model, a, P, P_inf, t), record, term


def filter_step(
    model: AnyModel,
    state: FilterState,
    obs: Optional[np.ndarray],
    joseph: bool = False,
    univariate: bool = False,
) -> Tuple[FilterState, InnovationRecord]:
    """
    Advance the filter by one observation.

    Args:
        model: Single-entity or stacked model
        state: One-step prediction (Z_t, P_t[, P_inf])
        obs: Observation vector; NaN components (or None) are missing
        joseph: Use the Joseph-form covariance update (large-kappa runs)
        univariate: Process components sequentially instead of inverting F_t

    Returns:
        (prediction for t+1, innovation record of step t)

    Raises:
        NumericalError: F_t numerically singular (condition number above
            SINGULAR_CONDITION)
    """
    next_state, record, _ = _filter_step(model, state, obs, joseph=joseph, univariate=univariate)
    return next_state, record


def _filter_step(model, state, obs, joseph=False, univariate=False):
    t = state.t
    y, observed = _observation(obs, model.obs_dim)
    a, P, P_inf = state.Z, state.P, state.P_inf

    if not observed.any():
        record = _record(t, y, np.zeros((0, 0)), np.zeros((a.size, 0)), observed, False, a, P, P_inf)
        return _predict(model, a, P, P_inf, t), record, LoglikTerm(t=t, logdet=0.0, quad=0.0, n_obs=0)

    if univariate:
        return _step_univariate(model, state, y, observed)

    W = model.W[observed]
    H = model.H[np.ix_(observed, observed)]
    v = y[observed] - W @ a
    K = P @ W.T

    if P_inf is not None:
        F_inf = _symmetrize(W @ P_inf @ W.T)
        if not _is_negligible(F_inf):
            if np.linalg.eigvalsh(F_inf)[0] <= settings.DIFFUSE_TOLERANCE:
                # partially diffuse observation vector: exact only component-wise
                return _step_univariate(model, state, y, observed)
            return _diffuse_update(model, state, y, observed, W, H, v, F_inf)

    F = _symmetrize(W @ P @ W.T + H)
    _check_innovation_cov(F, t)
    try:
        chol = cho_factor(F, lower=True)
    except np.linalg.LinAlgError as exc:
        error_logger.error(f"Cholesky of F_t failed at step {t}: {exc}")
        raise NumericalError("Innovation covariance F_t is not positive definite", module="kalman", step=t) from exc

    gain = cho_solve(chol, K.T).T  # K F^-1
    a_f = a + gain @ v
    if joseph:
        A = np.eye(a.size) - gain @ W
        P_f = A @ P @ A.T + gain @ H @ gain.T
    else:
        P_f = P - gain @ K.T
    P_f = _symmetrize(P_f)

    logdet = 2.0 * float(np.log(np.diag(chol[0])).sum())
    quad = float(v @ cho_solve(chol, v))
    term = LoglikTerm(t=t, logdet=logdet, quad=quad, n_obs=int(observed.sum()))
    record = _record(t, _scatter(v, observed), F, K, observed, False, a_f, P_f, P_inf)
    return _predict(model, a_f, P_f, P_inf, t), record, term


def _diffuse_update(model, state, y, observed, W, H, v, F_inf):
    """Multivariate exact-diffuse update for a nonsingular F_inf."""
    t = state.t
    a, P, P_inf = state.Z, state.P, state.P_inf
    M_inf = P_inf @ W.T
    M_star = P @ W.T
    F_star = _symmetrize(W @ P @ W.T + H)

    F1 = np.linalg.inv(F_inf)
    F2 = -F1 @ F_star @ F1
    K0 = M_inf @ F1
    K1 = M_star @ F1 + M_inf @ F2

    a_f = a + K0 @ v
    P_inf_f = _symmetrize(P_inf - K0 @ M_inf.T)
    P_f = _symmetrize(P - K0 @ M_star.T - K1 @ M_inf.T)

    sign, logdet_inf = np.linalg.slogdet(F_inf)
    term = LoglikTerm(t=t, logdet=0.0, quad=0.0, n_obs=0, diffuse=True, diffuse_logdet=float(logdet_inf))
    record = _record(t, _scatter(v, observed), F_inf, M_star, observed, True, a_f, P_f, P_inf_f)
    return _predict(model, a_f, P_f, P_inf_f, t), record, term


def _deplete(model: AnyModel, P_inf: Optional[np.ndarray], observed: np.ndarray) -> Tuple[bool, Optional[np.ndarray]]:
    """Advance only the diffuse part; tells whether this step is diffuse."""
    if _is_negligible(P_inf):
        return False, None
    diffuse = False
    P_inf = P_inf.copy()
    for i in np.flatnonzero(observed):
        w = model.W[i]
        M_inf = P_inf @ w
        F_inf = w @ M_inf
        if F_inf > settings.DIFFUSE_TOLERANCE:
            diffuse = True
            P_inf = P_inf - np.outer(M_inf, M_inf) / F_inf
    P_inf = _symmetrize(model.T @ P_inf @ model.T.T)
    return diffuse, None if _is_negligible(P_inf) else P_inf


def _as_observations(window: Union[Window, np.ndarray], obs_dim: int) -> np.ndarray:
    points = window.points if isinstance(window, Window) else np.asarray(window, dtype=float)
    points = points.reshape(points.shape[0], -1)
    if points.shape[1] != obs_dim:
        raise DataError(f"Observations have {points.shape[1]} columns, model expects {obs_dim}")
    return points


def _run(model: AnyModel, window, init: Optional[DiffuseInit], univariate: bool) -> FilterPass:
    observations = _as_observations(window, model.obs_dim)
    init = init or DiffuseInit.diffuse(model.state_dim)
    state = init.initial_state()
    large_kappa = init.mode == "large-kappa"
    shadow = None if _is_negligible(init.P_inf) else init.P_inf.copy()

    predicted, records, terms, flags = [state], [], [], []
    for y in observations:
        state, record, term = _filter_step(model, state, y, joseph=large_kappa and not univariate, univariate=univariate)
        if large_kappa:
            flagged, shadow = _deplete(model, shadow, record.observed)
            if flagged:
                term = LoglikTerm(
                    t=term.t, logdet=0.0, quad=0.0, n_obs=0, diffuse=True,
                    diffuse_logdet=term.logdet,
                )
        predicted.append(state)
        records.append(record)
        terms.append(term)
        flags.append(term.diffuse)

    if univariate:
        max_dim = 1 if observations.size else 0
    else:
        max_dim = max((r.F.shape[0] for r in records), default=0)
    return FilterPass(predicted=predicted, records=records, loglik_terms=terms, max_inverted_dim=max_dim, diffuse_flags=flags)


def filter_pass(model: AnyModel, window: Union[Window, np.ndarray], init: Optional[DiffuseInit] = None) -> FilterPass:
    """
    Run the batch recursion over a window of observations.

    Args:
        model: Single-entity or stacked model
        window: Window, or an (n, p) array with NaN for missing components
        init: Initial distribution (exact diffuse when omitted)

    Returns:
        FilterPass with predictions, innovation records and per-step
        likelihood terms (diffuse steps flagged and excluded)
    """
    return _run(model, window, init, univariate=False)


def univariate_filter_pass(model: AnyModel, window: Union[Window, np.ndarray], init: Optional[DiffuseInit] = None) -> FilterPass:
    """
    Same recursion with each observation component processed sequentially.

    Valid because Sigma is diagonal; only scalar innovation variances are
    divided by, never a matrix inverse.
    """
    return _run(model, window, init, univariate=True)


def fast_loglik(model: SingleEntityModel, points: np.ndarray, init: Optional[DiffuseInit] = None) -> float:
    """
    Log-likelihood of a gap-free single-entity window.

    Runs the general recursion through the diffuse phase, then a lean loop
    with a closed-form 2x2 inverse. Agrees with `filter_pass(...).loglik`.
    """
    points = np.asarray(points, dtype=float)
    if not isinstance(model, SingleEntityModel) or np.isnan(points).any():
        return filter_pass(model, points, init).loglik

    init = init or DiffuseInit.diffuse(model.state_dim)
    if init.mode == "large-kappa":
        return filter_pass(model, points, init).loglik

    state = init.initial_state()
    total = 0.0
    t = 0
    n = points.shape[0]
    while t < n and state.diffuse:
        state, _, term = _filter_step(model, state, points[t])
        total += term.value
        t += 1

    T, RQR, H = model.T, model.RQR, model.H
    a, P = state.Z, state.P
    limit = settings.SINGULAR_CONDITION
    for step in range(t, n):
        v = points[step] - a[:2]
        F = P[:2, :2] + H
        f00, f01, f10, f11 = F[0, 0], 0.5 * (F[0, 1] + F[1, 0]), 0.5 * (F[0, 1] + F[1, 0]), F[1, 1]
        det = f00 * f11 - f01 * f10
        half_tr = 0.5 * (f00 + f11)
        disc = np.sqrt(max(half_tr * half_tr - det, 0.0))
        lo, hi = half_tr - disc, half_tr + disc
        if lo <= 0 or hi / lo > limit:
            raise NumericalError("Innovation covariance F_t is numerically singular", module="kalman", step=step + 1)
        F_inv = np.array([[f11, -f01], [-f10, f00]]) / det
        K = P[:, :2]
        Fv = F_inv @ v
        a = T @ (a + K @ Fv)
        P = T @ (P - K @ F_inv @ K.T) @ T.T + RQR
        P = 0.5 * (P + P.T)
        total += -0.5 * (2 * LOG_2PI + np.log(det) + v @ Fv)
    return float(total)


def lower_triangle(P: np.ndarray) -> np.ndarray:
    """Row-major lower-triangle entries of a square matrix."""
    return P[np.tril_indices(P.shape[0])]


def filter_result_rows(result: FilterPass, entity_ids: List[int], start_index: int = 0) -> List[dict]:
    """
    Flatten filtered states into CSV rows.

    Columns: t, entity, x, y, vx, vy and the 10 lower-triangle entries
    p11..p44 of the entity's 4x4 covariance block.
    """
    tril = np.tril_indices(4)
    names = [f"p{i + 1}{j + 1}" for i, j in zip(*tril)]
    rows = []
    for step, record in enumerate(result.records):
        Z, P = record.filtered.Z, record.filtered.P
        for k, entity_id in enumerate(entity_ids):
            block = slice(4 * k, 4 * k + 4)
            z = Z[block]
            row = {"t": start_index + step, "entity": entity_id,
                   "x": z[0], "y": z[1], "vx": z[2], "vy": z[3]}
            row.update(zip(names, P[block, block][tril]))
            rows.append(row)
    return rows
