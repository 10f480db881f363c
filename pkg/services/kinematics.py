"""
15-state rigid-body kinematics shared by both filters.

State layout: [x, y, z, roll, pitch, yaw, vx, vy, vz, wx, wy, wz, ax, ay, az]
with position in odom, Euler angles applied Z-Y-X, and body-frame
velocities, rates and accelerations.
"""
import math
from typing import Optional, Sequence, Tuple

import numpy as np

from services.exceptions import GimbalSingularityError
from services.geo import wrap_angle
from services.sensors import SensorKind

STATE_DIM = 15
POS = slice(0, 3)
ANG = slice(3, 6)
VEL = slice(6, 9)
RATE = slice(9, 12)
ACC = slice(12, 15)
ANGLE_INDICES = (3, 4, 5)

GIMBAL_TOLERANCE = 1e-6

_IMU_ROWS = (3, 4, 5, 9, 10, 11, 12, 13, 14)


def _check_gimbal(pitch: np.ndarray) -> None:
    if np.any(np.abs(np.abs(pitch) - math.pi / 2) < GIMBAL_TOLERANCE):
        raise GimbalSingularityError("pitch within 1e-6 of +-pi/2, Euler rates are undefined")


def _rotation_stack(roll, pitch, yaw) -> np.ndarray:
    """Rz(yaw) Ry(pitch) Rx(roll) for arrays of angles, shape (..., 3, 3)."""
    cr, sr = np.cos(roll), np.sin(roll)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    return np.stack(
        [
            np.stack([cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr], axis=-1),
            np.stack([sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr], axis=-1),
            np.stack([-sp, cp * sr, cp * cr], axis=-1),
        ],
        axis=-2,
    )


def _rotation_partials(roll: float, pitch: float, yaw: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """dR/droll, dR/dpitch, dR/dyaw."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    d_roll = np.array([
        [0.0, cy * sp * cr + sy * sr, -cy * sp * sr + sy * cr],
        [0.0, sy * sp * cr - cy * sr, -sy * sp * sr - cy * cr],
        [0.0, cp * cr, -cp * sr],
    ])
    d_pitch = np.array([
        [-cy * sp, cy * cp * sr, cy * cp * cr],
        [-sy * sp, sy * cp * sr, sy * cp * cr],
        [-cp, -sp * sr, -sp * cr],
    ])
    d_yaw = np.array([
        [-sy * cp, -sy * sp * sr - cy * cr, -sy * sp * cr + cy * sr],
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [0.0, 0.0, 0.0],
    ])
    return d_roll, d_pitch, d_yaw


def euler_rate_matrix(roll: float, pitch: float) -> np.ndarray:
    """E(roll, pitch): body angular rates to Euler angle rates."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, tp = math.cos(pitch), math.tan(pitch)
    return np.array([
        [1.0, sr * tp, cr * tp],
        [0.0, cr, -sr],
        [0.0, sr / cp, cr / cp],
    ])


def process_model(x: np.ndarray, dt: float) -> np.ndarray:
    """
    Propagate one state, or a stack of states shaped (N, 15), by dt seconds.

    Raises:
        GimbalSingularityError: If any pitch sits on +-pi/2
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    roll, pitch, yaw = xs[:, 3], xs[:, 4], xs[:, 5]
    _check_gimbal(pitch)

    out = xs.copy()
    disp = xs[:, VEL] * dt + 0.5 * xs[:, ACC] * dt * dt
    out[:, POS] += np.einsum("nij,nj->ni", _rotation_stack(roll, pitch, yaw), disp)

    cr, sr = np.cos(roll), np.sin(roll)
    cp, tp = np.cos(pitch), np.tan(pitch)
    wx, wy, wz = xs[:, 9], xs[:, 10], xs[:, 11]
    coupled = sr * wy + cr * wz
    out[:, 3] = wrap_angle(roll + (wx + coupled * tp) * dt)
    out[:, 4] = wrap_angle(pitch + (cr * wy - sr * wz) * dt)
    out[:, 5] = wrap_angle(yaw + coupled / cp * dt)
    out[:, VEL] += xs[:, ACC] * dt
    return out[0] if single else out


def process_jacobian(x: np.ndarray, dt: float) -> np.ndarray:
    """Analytic 15x15 Jacobian of process_model at x."""
    x = np.asarray(x, dtype=float)
    roll, pitch, yaw = float(x[3]), float(x[4]), float(x[5])
    _check_gimbal(np.array([pitch]))

    F = np.eye(STATE_DIM)
    R = _rotation_stack(roll, pitch, yaw)
    disp = x[VEL] * dt + 0.5 * x[ACC] * dt * dt
    for k, dR in enumerate(_rotation_partials(roll, pitch, yaw)):
        F[POS, 3 + k] = dR @ disp
    F[POS, VEL] = R * dt
    F[POS, ACC] = R * (0.5 * dt * dt)

    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp, tp = math.cos(pitch), math.sin(pitch), math.tan(pitch)
    wy, wz = float(x[10]), float(x[11])
    coupled = sr * wy + cr * wz
    coupled_droll = cr * wy - sr * wz
    F[3, 3] += coupled_droll * tp * dt
    F[4, 3] += (-sr * wy - cr * wz) * dt
    F[5, 3] += coupled_droll / cp * dt
    F[3, 4] += coupled / (cp * cp) * dt
    F[5, 4] += coupled * sp / (cp * cp) * dt
    F[ANG, RATE] = euler_rate_matrix(roll, pitch) * dt

    F[VEL, ACC] = np.eye(3) * dt
    return F


class KinematicProcess:
    """The 15-state model in the shape both filters expect."""

    dim = STATE_DIM
    angle_indices = ANGLE_INDICES

    def f(self, x: np.ndarray, dt: float) -> np.ndarray:
        return process_model(x, dt)

    def jacobian(self, x: np.ndarray, dt: float) -> np.ndarray:
        return process_jacobian(x, dt)


def measurement_model(kind: SensorKind, x: np.ndarray, mount_offset: Optional[Sequence[float]] = None) -> np.ndarray:
    """
    Predicted measurement for one state or a (N, 15) stack.

    gps_position is the antenna position (state position plus the rotated
    mount offset); imu_bundle copies angles, rates and accelerations;
    encoder_velocity is vx.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if kind == SensorKind.GPS_POSITION:
        out = xs[:, POS].copy()
        if mount_offset is not None and np.any(np.asarray(mount_offset) != 0.0):
            R = _rotation_stack(xs[:, 3], xs[:, 4], xs[:, 5])
            out += R @ np.asarray(mount_offset, dtype=float)
    elif kind == SensorKind.IMU_BUNDLE:
        out = xs[:, _IMU_ROWS].copy()
    elif kind == SensorKind.ENCODER_VELOCITY:
        out = xs[:, 6:7].copy()
    else:
        raise ValueError(f"unknown sensor kind {kind!r}")
    return out[0] if single else out


def measurement_jacobian(kind: SensorKind, x: np.ndarray, mount_offset: Optional[Sequence[float]] = None) -> np.ndarray:
    """H = dh/dx; exact since every model is linear apart from the lever-arm rotation."""
    if kind == SensorKind.GPS_POSITION:
        H = np.zeros((3, STATE_DIM))
        H[:, POS] = np.eye(3)
        if mount_offset is not None and np.any(np.asarray(mount_offset) != 0.0):
            lever = np.asarray(mount_offset, dtype=float)
            for k, dR in enumerate(_rotation_partials(float(x[3]), float(x[4]), float(x[5]))):
                H[:, 3 + k] = dR @ lever
        return H
    if kind == SensorKind.IMU_BUNDLE:
        H = np.zeros((9, STATE_DIM))
        H[np.arange(9), _IMU_ROWS] = 1.0
        return H
    if kind == SensorKind.ENCODER_VELOCITY:
        H = np.zeros((1, STATE_DIM))
        H[0, 6] = 1.0
        return H
    raise ValueError(f"unknown sensor kind {kind!r}")


class KinematicObservation:
    """Observation of one sensor kind, with the device's mount offset."""

    def __init__(self, kind: SensorKind, mount_offset: Optional[Sequence[float]] = None):
        self.kind = kind
        self.mount_offset = None if mount_offset is None else np.asarray(mount_offset, dtype=float)
        self.angle_indices: Tuple[int, ...] = (0, 1, 2) if kind == SensorKind.IMU_BUNDLE else ()

    def h(self, x: np.ndarray) -> np.ndarray:
        return measurement_model(self.kind, x, self.mount_offset)

    def jacobian(self, x: np.ndarray) -> np.ndarray:
        return measurement_jacobian(self.kind, x, self.mount_offset)
