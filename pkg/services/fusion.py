"""
Extended and unscented Kalman filters with Mahalanobis innovation gating.

Both filters run against a process model (``f``, ``jacobian``, ``dim``,
``angle_indices``) and a per-reading observation model (``h``,
``jacobian``, ``angle_indices``). The 15-state kinematics in
services.kinematics is the production model; LinearProcess and
LinearObservation cover plain linear-Gaussian systems.
"""
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Dict, List, Literal, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg
from scipy.stats import chi2

from config.logging_config import get_logger
from services.exceptions import CovarianceDegenerateError, StreamOrderError
from services.geo import rotation_matrix, wrap_angle
from services.kinematics import ANG, POS, STATE_DIM, KinematicObservation, KinematicProcess
from services.sensors import SensorKind, SensorReading

logger = get_logger(__name__)

SIGMA_JITTER = 1e-12
PSD_TOLERANCE = 1e-9
MAX_PREDICT_STEP = 1.0


class ProcessModel(Protocol):
    dim: int
    angle_indices: Tuple[int, ...]

    def f(self, x: np.ndarray, dt: float) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray, dt: float) -> np.ndarray: ...


class ObservationModel(Protocol):
    angle_indices: Tuple[int, ...]

    def h(self, x: np.ndarray) -> np.ndarray: ...

    def jacobian(self, x: np.ndarray) -> np.ndarray: ...


class LinearProcess:
    """x' = F(dt) x with F = I + A dt."""

    def __init__(self, A: np.ndarray):
        self.A = np.asarray(A, dtype=float)
        self.dim = self.A.shape[0]
        self.angle_indices: Tuple[int, ...] = ()

    def jacobian(self, x: np.ndarray, dt: float) -> np.ndarray:
        return np.eye(self.dim) + self.A * dt

    def f(self, x: np.ndarray, dt: float) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.jacobian(x, dt).T


class LinearObservation:
    def __init__(self, H: np.ndarray):
        self.H = np.atleast_2d(np.asarray(H, dtype=float))
        self.angle_indices: Tuple[int, ...] = ()

    def h(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.H.T

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return self.H


KINEMATICS = KinematicProcess()


@dataclass(frozen=True, eq=False)
class StateEstimate:
    """Mean, covariance and time; ``on_grid`` marks output-grid predictions."""

    x: np.ndarray
    P: np.ndarray
    t: float
    on_grid: bool = False


class NoiseConfig(BaseModel):
    """Per-second process noise variances, one value per state block."""

    model_config = ConfigDict(frozen=True)

    position: float = Field(default=0.05, ge=0.0)
    angles: float = Field(default=0.03, ge=0.0)
    velocities: float = Field(default=0.1, ge=0.0)
    rates: float = Field(default=0.05, ge=0.0)
    accelerations: float = Field(default=0.5, ge=0.0)

    def matrix(self) -> np.ndarray:
        return np.diag(np.repeat(
            [self.position, self.angles, self.velocities, self.rates, self.accelerations], 3
        ))


class GateConfig(BaseModel):
    """Mahalanobis gate: threshold per measurement dimension."""

    model_config = ConfigDict(frozen=True)

    enabled: bool = True
    quantile: float = Field(default=0.999, gt=0.0, lt=1.0)
    thresholds: Dict[int, float] = Field(default_factory=dict, description="Explicit cutoffs by dimension")

    def threshold(self, dim: int) -> float:
        if dim in self.thresholds:
            value = self.thresholds[dim]
            if value <= 0.0:
                raise ValueError("gate thresholds must be positive")
            return value
        return _chi_threshold(self.quantile, dim)


@lru_cache(maxsize=64)
def _chi_threshold(quantile: float, dim: int) -> float:
    return math.sqrt(chi2.ppf(quantile, dim))


class GateDecision(NamedTuple):
    accepted: bool
    distance: float
    bypassed: bool = False


class FilterConfig(BaseModel):
    """Filter choice, process noise, gate and initial uncertainty."""

    kind: Literal["ekf", "ukf"] = "ukf"
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    gate: GateConfig = Field(default_factory=GateConfig)
    initial_position_sigma: float = Field(default=10.0, gt=0.0)
    initial_angle_sigma: float = Field(default=0.5, gt=0.0)
    initial_rate_sigma: float = Field(default=1.0, gt=0.0)


def _wrap_at(v: np.ndarray, indices: Sequence[int]) -> np.ndarray:
    if indices:
        v = np.array(v, dtype=float)
        v[..., list(indices)] = wrap_angle(v[..., list(indices)])
    return v


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def _is_psd(P: np.ndarray) -> bool:
    return float(np.linalg.eigvalsh(P)[0]) >= -PSD_TOLERANCE


def _repair(P: np.ndarray) -> np.ndarray:
    """Symmetrise and clip negative eigenvalues."""
    P = _symmetrize(P)
    vals, vecs = np.linalg.eigh(P)
    if vals[0] < -PSD_TOLERANCE:
        logger.debug(f"covariance repair: min eigenvalue {vals[0]:.3e}")
        P = _symmetrize((vecs * np.clip(vals, 0.0, None)) @ vecs.T)
    return P


def mahalanobis_gate(
    innovation: np.ndarray,
    S: np.ndarray,
    g: GateConfig,
    angle_indices: Sequence[int] = (),
) -> GateDecision:
    """
    D_M = sqrt(nu' S^-1 nu), accepted iff D_M <= threshold(dim).

    A singular S cannot be gated: the reading is accepted and the bypass
    is logged.
    """
    nu = _wrap_at(np.atleast_1d(np.asarray(innovation, dtype=float)), angle_indices)
    S = np.atleast_2d(S)
    try:
        factor = linalg.cho_factor(S, lower=True)
        d2 = float(nu @ linalg.cho_solve(factor, nu))
    except (linalg.LinAlgError, ValueError):
        logger.warning("gate bypass: innovation covariance is singular")
        return GateDecision(True, float("nan"), bypassed=True)

    distance = math.sqrt(max(d2, 0.0))
    if not g.enabled:
        return GateDecision(True, distance)
    return GateDecision(distance <= g.threshold(len(nu)), distance)


def _solve_gain(cross: np.ndarray, S: np.ndarray) -> np.ndarray:
    """K = cross S^-1, with a pseudo-inverse when S is singular."""
    try:
        factor = linalg.cho_factor(S, lower=True)
        return linalg.cho_solve(factor, cross.T).T
    except (linalg.LinAlgError, ValueError):
        return cross @ np.linalg.pinv(S)


def _substeps(dt: float) -> List[float]:
    n = max(1, int(math.ceil(dt / MAX_PREDICT_STEP - 1e-12)))
    return [dt / n] * n


# -- EKF ---------------------------------------------------------------------


def ekf_predict(e: StateEstimate, Q: np.ndarray, dt: float, model: ProcessModel = KINEMATICS) -> StateEstimate:
    """x <- f(x, dt); P <- A P A' + Q dt. Gaps over 1 s are split into sub-steps."""
    if dt <= 0.0:
        raise ValueError(f"prediction step must be positive, got {dt}")
    x, P = e.x, e.P
    for h in _substeps(dt):
        A = model.jacobian(x, h)
        x = model.f(x, h)
        P = _symmetrize(A @ P @ A.T + Q * h)
    return StateEstimate(x, _repair(P), e.t + dt)


def ekf_correct(
    e: StateEstimate,
    z: np.ndarray,
    R: np.ndarray,
    obs: ObservationModel,
    g: GateConfig,
    model: ProcessModel = KINEMATICS,
) -> Tuple[StateEstimate, GateDecision]:
    """EKF measurement correction with a Joseph-form covariance update."""
    H = obs.jacobian(e.x)
    nu = _wrap_at(np.asarray(z, dtype=float) - obs.h(e.x), obs.angle_indices)
    S = _symmetrize(H @ e.P @ H.T + R)

    decision = mahalanobis_gate(nu, S, g)
    if not decision.accepted:
        return e, decision

    K = _solve_gain(e.P @ H.T, S)
    x = _wrap_at(e.x + K @ nu, model.angle_indices)
    I_KH = np.eye(len(e.x)) - K @ H
    P = I_KH @ e.P @ I_KH.T + K @ R @ K.T
    return StateEstimate(x, _repair(P), e.t), decision


def ekf_update(
    e: StateEstimate,
    r: SensorReading,
    g: GateConfig,
    obs: Optional[ObservationModel] = None,
) -> StateEstimate:
    obs = obs or KinematicObservation(r.kind)
    return ekf_correct(e, r.value, r.noise_cov, obs, g)[0]


# -- UKF ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SigmaSet:
    points: np.ndarray
    weights: np.ndarray


def default_lambda(L: int) -> float:
    return 3.0 - L


def ukf_weights(L: int, lam: Optional[float] = None) -> np.ndarray:
    """a0 = lam/(L+lam), ai = 1/(2(L+lam)); 2L+1 entries."""
    if L < 1:
        raise ValueError("state dimension must be at least 1")
    lam = default_lambda(L) if lam is None else lam
    if L + lam == 0.0:
        raise ValueError("L + lambda must be non-zero")
    w = np.full(2 * L + 1, 1.0 / (2.0 * (L + lam)))
    w[0] = lam / (L + lam)
    return w


def ukf_sigma_points(mean: np.ndarray, P: np.ndarray, lam: Optional[float] = None) -> SigmaSet:
    """
    2L+1 points: the mean and mean +- columns of sqrt((L+lam) P).

    Raises:
        CovarianceDegenerateError: If the jittered Cholesky factorisation fails
    """
    mean = np.asarray(mean, dtype=float)
    L = len(mean)
    lam = default_lambda(L) if lam is None else lam
    try:
        root = linalg.cholesky((L + lam) * (np.asarray(P) + SIGMA_JITTER * np.eye(L)), lower=True)
    except linalg.LinAlgError as e:
        raise CovarianceDegenerateError(f"covariance is not positive definite: {e}") from e
    points = np.empty((2 * L + 1, L))
    points[0] = mean
    points[1:L + 1] = mean + root.T
    points[L + 1:] = mean - root.T
    return SigmaSet(points, ukf_weights(L, lam))


def circular_mean(angles: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted mean direction, atan2 of the weighted sin and cos sums."""
    return np.arctan2(weights @ np.sin(angles), weights @ np.cos(angles))


def _weighted_mean(points: np.ndarray, weights: np.ndarray, angle_indices: Sequence[int]) -> np.ndarray:
    mean = weights @ points
    if angle_indices:
        idx = list(angle_indices)
        if np.all(weights >= 0.0):
            mean[idx] = circular_mean(points[:, idx], weights)
        else:
            # negative centre weight: average wrapped residuals about the centre point
            ref = points[0, idx]
            mean[idx] = wrap_angle(ref + weights @ wrap_angle(points[:, idx] - ref))
    return mean


def _residuals(points: np.ndarray, mean: np.ndarray, angle_indices: Sequence[int]) -> np.ndarray:
    return _wrap_at(points - mean, angle_indices)


def _unscented_predict(e: StateEstimate, Q: np.ndarray, dt: float, model: ProcessModel, lam: float):
    x, P = e.x, e.P
    for h in _substeps(dt):
        sigma = ukf_sigma_points(x, P, lam)
        propagated = model.f(sigma.points, h)
        x = _weighted_mean(propagated, sigma.weights, model.angle_indices)
        dx = _residuals(propagated, x, model.angle_indices)
        P = _symmetrize((dx.T * sigma.weights) @ dx + Q * h)
        if not _is_psd(P):
            return None
    return StateEstimate(x, P, e.t + dt)


def ukf_predict(e: StateEstimate, Q: np.ndarray, dt: float, model: ProcessModel = KINEMATICS) -> StateEstimate:
    """
    Propagate sigma points through the process model.

    Falls back to lambda = 0 for this step when the negative centre weight
    leaves the predicted covariance indefinite.
    """
    if dt <= 0.0:
        raise ValueError(f"prediction step must be positive, got {dt}")
    out = _unscented_predict(e, Q, dt, model, default_lambda(model.dim))
    if out is None:
        logger.info(f"ukf predict at t={e.t + dt:.3f}: indefinite covariance, retrying with lambda=0")
        out = _unscented_predict(e, Q, dt, model, 0.0)
    return StateEstimate(out.x, _repair(out.P), out.t)


def _unscented_correct(e, z, R, obs, g, model, lam):
    sigma = ukf_sigma_points(e.x, e.P, lam)
    predicted = obs.h(sigma.points)
    if predicted.ndim == 1:
        predicted = predicted[:, None]
    y = _weighted_mean(predicted, sigma.weights, obs.angle_indices)
    dy = _residuals(predicted, y, obs.angle_indices)
    dx = _residuals(sigma.points, e.x, model.angle_indices)
    Py = _symmetrize((dy.T * sigma.weights) @ dy + R)
    Pxy = (dx.T * sigma.weights) @ dy

    nu = _wrap_at(np.atleast_1d(np.asarray(z, dtype=float)) - y, obs.angle_indices)
    decision = mahalanobis_gate(nu, Py, g)
    if not decision.accepted:
        return e, decision

    K = _solve_gain(Pxy, Py)
    x = _wrap_at(e.x + K @ nu, model.angle_indices)
    P = _symmetrize(e.P - K @ Py @ K.T)
    if not _is_psd(P):
        return None, decision
    return StateEstimate(x, P, e.t), decision


def ukf_correct(
    e: StateEstimate,
    z: np.ndarray,
    R: np.ndarray,
    obs: ObservationModel,
    g: GateConfig,
    model: ProcessModel = KINEMATICS,
) -> Tuple[StateEstimate, GateDecision]:
    """Sigma-point correction; sigma points are redrawn from the prior."""
    out, decision = _unscented_correct(e, z, R, obs, g, model, default_lambda(model.dim))
    if out is None:
        logger.info(f"ukf update at t={e.t:.3f}: indefinite covariance, retrying with lambda=0")
        out, decision = _unscented_correct(e, z, R, obs, g, model, 0.0)
        if out is None:
            raise CovarianceDegenerateError("posterior covariance indefinite after lambda=0 retry")
    if out is e:
        return e, decision
    return StateEstimate(out.x, _repair(out.P), out.t), decision


def ukf_update(
    e: StateEstimate,
    r: SensorReading,
    g: GateConfig,
    obs: Optional[ObservationModel] = None,
) -> StateEstimate:
    obs = obs or KinematicObservation(r.kind)
    return ukf_correct(e, r.value, r.noise_cov, obs, g)[0]


# -- filter objects ----------------------------------------------------------


class KalmanFilter:
    """
    Single-owner filter state machine.

    Holds the current estimate and counts accepted, rejected and bypassed
    readings.
    """

    kind = ""

    def __init__(
        self,
        init: StateEstimate,
        Q: np.ndarray,
        gate: GateConfig,
        model: ProcessModel = KINEMATICS,
        mounts: Optional[Dict[str, Sequence[float]]] = None,
    ):
        self.estimate = init
        self.Q = Q
        self.gate = gate
        self.model = model
        self.mounts = mounts or {}
        self.accepted = 0
        self.rejected = 0
        self.bypassed = 0
        self._observations: Dict[Tuple[str, SensorKind], KinematicObservation] = {}

    def _predict(self, e, dt):
        raise NotImplementedError

    def _correct(self, e, z, R, obs):
        raise NotImplementedError

    def predict_to(self, t: float) -> StateEstimate:
        dt = t - self.estimate.t
        if dt > 0.0:
            self.estimate = replace(self._predict(self.estimate, dt), t=t)
        return self.estimate

    def correct(self, z: np.ndarray, R: np.ndarray, obs: ObservationModel) -> GateDecision:
        self.estimate, decision = self._correct(self.estimate, z, R, obs)
        if decision.bypassed:
            self.bypassed += 1
        if decision.accepted:
            self.accepted += 1
        else:
            self.rejected += 1
            logger.debug(f"{self.kind}: rejected reading at t={self.estimate.t:.3f}, D_M={decision.distance:.2f}")
        return decision

    def observation_for(self, r: SensorReading) -> KinematicObservation:
        key = (r.device_id, r.kind)
        if key not in self._observations:
            self._observations[key] = KinematicObservation(r.kind, self.mounts.get(r.device_id))
        return self._observations[key]

    def update(self, r: SensorReading) -> GateDecision:
        self.predict_to(r.t)
        return self.correct(r.value, r.noise_cov, self.observation_for(r))


class ExtendedKalmanFilter(KalmanFilter):
    kind = "ekf"

    def _predict(self, e, dt):
        return ekf_predict(e, self.Q, dt, self.model)

    def _correct(self, e, z, R, obs):
        return ekf_correct(e, z, R, obs, self.gate, self.model)


class UnscentedKalmanFilter(KalmanFilter):
    kind = "ukf"

    def _predict(self, e, dt):
        return ukf_predict(e, self.Q, dt, self.model)

    def _correct(self, e, z, R, obs):
        return ukf_correct(e, z, R, obs, self.gate, self.model)


FILTERS = {"ekf": ExtendedKalmanFilter, "ukf": UnscentedKalmanFilter}


def initial_estimate(
    readings: Sequence[SensorReading],
    config: FilterConfig,
    t0: Optional[float] = None,
    mounts: Optional[Dict[str, Sequence[float]]] = None,
) -> StateEstimate:
    """
    Build the starting estimate from the readings taken at the stream's start.

    Attitude comes from the first IMU bundle at t0 (zero without one). The
    position is the mean of every GPS fix at t0 with each antenna's mount
    offset, rotated by that attitude, taken back out; it stays at the origin
    when GPS starts in an outage.
    """
    if t0 is None:
        t0 = readings[0].t if readings else 0.0
    mounts = mounts or {}
    x = np.zeros(STATE_DIM)
    fixes: List[SensorReading] = []
    attitude: Optional[np.ndarray] = None
    for r in readings:
        if r.t > t0:
            break
        if r.kind == SensorKind.GPS_POSITION:
            fixes.append(r)
        elif r.kind == SensorKind.IMU_BUNDLE and attitude is None:
            attitude = r.value[0:3]
    if attitude is not None:
        x[ANG] = attitude
    if fixes:
        R = rotation_matrix(*x[ANG])
        origins = [r.value - R @ np.asarray(mounts.get(r.device_id, (0.0, 0.0, 0.0)), dtype=float)
                   for r in fixes]
        x[POS] = np.mean(origins, axis=0)
        logger.debug(f"initial position from {len(fixes)} GPS fix(es) at t={t0:.3f}")
    sigmas = np.repeat(
        [config.initial_position_sigma, config.initial_angle_sigma, config.initial_rate_sigma,
         config.initial_rate_sigma, config.initial_rate_sigma],
        3,
    )
    return StateEstimate(x, np.diag(sigmas**2), t0)


def run_filter(
    kind: str,
    config: FilterConfig,
    readings: Sequence[SensorReading],
    init: Optional[StateEstimate] = None,
    output_rate_hz: float = 10.0,
    end_time: Optional[float] = None,
    mounts: Optional[Dict[str, Sequence[float]]] = None,
) -> List[StateEstimate]:
    """
    Drive a filter through a merged reading stream.

    Args:
        kind: "ekf" or "ukf"
        config: Noise, gate and initial uncertainty
        readings: Time-ordered merged stream
        init: Starting estimate; derived from the stream when omitted
        output_rate_hz: Rate of the output grid
        end_time: Last output grid time; defaults to the last reading
        mounts: GPS antenna mount offsets by device id

    Returns:
        Post-update estimates for every reading, interleaved with grid
        estimates (``on_grid=True``) at every k / output_rate_hz.

    Raises:
        StreamOrderError: If timestamps go backwards
    """
    if kind not in FILTERS:
        raise ValueError(f"unknown filter kind {kind!r}")
    if init is None:
        init = initial_estimate(readings, config, mounts=mounts)
    if end_time is None:
        end_time = readings[-1].t if readings else init.t

    kf = FILTERS[kind](init, config.noise.matrix(), config.gate, mounts=mounts)
    out: List[StateEstimate] = []
    tick = max(0, int(math.ceil(init.t * output_rate_hz - 1e-9)))

    def emit_grid(until: float, inclusive: bool):
        nonlocal tick
        while True:
            t_grid = tick / output_rate_hz
            if t_grid > until or (t_grid == until and not inclusive) or t_grid > end_time:
                return
            out.append(replace(kf.predict_to(t_grid), on_grid=True))
            tick += 1

    last_t = init.t
    for r in readings:
        if r.t < last_t:
            raise StreamOrderError(f"reading from {r.device_id} at t={r.t} precedes t={last_t}")
        emit_grid(r.t, inclusive=False)
        kf.update(r)
        out.append(kf.estimate)
        last_t = r.t
    emit_grid(end_time, inclusive=True)

    logger.info(
        f"{kind}: {len(readings)} readings, accepted={kf.accepted} rejected={kf.rejected} "
        f"bypassed={kf.bypassed}"
    )
    return out
