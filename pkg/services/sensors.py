"""
Synthetic GPS, IMU and wheel-encoder devices.

Every device draws from its own RNG substream derived from the master seed
and the device id, so adding or masking a device never changes another
device's samples.
"""
import math
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config.logging_config import get_logger
from services.geo import NavSatTransform, wrap_angle
from services.world import Trajectory, VehicleState

logger = get_logger(__name__)

Vector3 = Tuple[float, float, float]


class SensorKind(str, Enum):
    GPS_POSITION = "gps_position"
    IMU_BUNDLE = "imu_bundle"
    ENCODER_VELOCITY = "encoder_velocity"

    @property
    def dim(self) -> int:
        return _KIND_DIM[self]

    @property
    def priority(self) -> int:
        return _KIND_PRIORITY[self]

    @property
    def code(self) -> int:
        return _KIND_PRIORITY[self]

    @classmethod
    def from_code(cls, code: int) -> "SensorKind":
        for kind, value in _KIND_PRIORITY.items():
            if value == code:
                return kind
        raise ValueError(f"unknown sensor kind code {code}")


_KIND_DIM = {SensorKind.GPS_POSITION: 3, SensorKind.IMU_BUNDLE: 9, SensorKind.ENCODER_VELOCITY: 1}
_KIND_PRIORITY = {SensorKind.GPS_POSITION: 0, SensorKind.IMU_BUNDLE: 1, SensorKind.ENCODER_VELOCITY: 2}


@dataclass(frozen=True, eq=False)
class SensorReading:
    """One timestamped measurement with its noise covariance."""

    device_id: str
    t: float
    kind: SensorKind
    value: np.ndarray
    noise_cov: np.ndarray

    def __post_init__(self):
        dim = self.kind.dim
        if self.value.shape != (dim,) or self.noise_cov.shape != (dim, dim):
            raise ValueError(
                f"{self.kind.value} reading needs a {dim}-vector and {dim}x{dim} covariance, "
                f"got {self.value.shape} and {self.noise_cov.shape}"
            )

    def same_as(self, other: "SensorReading") -> bool:
        """Bitwise equality, used by replay checks."""
        return (
            self.device_id == other.device_id
            and self.t == other.t
            and self.kind == other.kind
            and self.value.tobytes() == other.value.tobytes()
            and self.noise_cov.tobytes() == other.noise_cov.tobytes()
        )


class DropoutSchedule(BaseModel):
    """Periodic signal loss: unavailable for ``outage`` s at the end of every period."""

    model_config = ConfigDict(frozen=True)

    period: float = Field(default=10.0, gt=0.0)
    outage: float = Field(default=1.0, ge=0.0)
    phase: Optional[float] = Field(default=None, description="None = derived from device index")

    @model_validator(mode="after")
    def check_outage(self):
        if not self.outage < self.period:
            raise ValueError("outage must be shorter than the period")
        return self


class OutlierModel(BaseModel):
    """Occasional gross errors added on top of the Gaussian noise."""

    model_config = ConfigDict(frozen=True)

    probability: float = Field(default=0.0, ge=0.0, le=1.0)
    magnitude: float = Field(default=50.0, ge=0.0, description="Horizontal offset in meters")


class GpsModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma_xy: float = Field(default=2.0, gt=0.0)
    sigma_z: float = Field(default=3.0, gt=0.0)
    rate_hz: float = Field(default=1.0, gt=0.0)
    dropout: DropoutSchedule = Field(default_factory=DropoutSchedule)
    mount_offset: Vector3 = (0.0, 0.0, 0.0)
    outliers: OutlierModel = Field(default_factory=OutlierModel)


class ImuModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma_orientation: float = Field(default=0.01, ge=0.0)
    sigma_gyro: float = Field(default=0.005, ge=0.0)
    sigma_accel: float = Field(default=0.05, ge=0.0)
    gyro_bias_walk: float = Field(default=1e-4, ge=0.0)
    accel_bias_walk: float = Field(default=1e-3, ge=0.0)
    yaw_bias_walk: float = Field(default=0.0, ge=0.0, description="Heading drift, rad per sqrt(s)")
    rate_hz: float = Field(default=100.0, gt=0.0)
    mount_offset: Vector3 = (0.0, 0.0, 0.0)


class EncoderModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    sigma_speed_rel: float = Field(default=0.02, ge=0.0)
    sigma_speed_abs: float = Field(default=0.02, ge=0.0)
    rate_hz: float = Field(default=50.0, gt=0.0)


class GpsDevice(BaseModel):
    id: str
    type: Literal["gps"] = "gps"
    model: GpsModel = Field(default_factory=GpsModel)


class ImuDevice(BaseModel):
    id: str
    type: Literal["imu"] = "imu"
    model: ImuModel = Field(default_factory=ImuModel)


class EncoderDevice(BaseModel):
    id: str
    type: Literal["encoder"] = "encoder"
    model: EncoderModel = Field(default_factory=EncoderModel)


Device = Union[GpsDevice, ImuDevice, EncoderDevice]

DEVICE_KIND = {
    "gps": SensorKind.GPS_POSITION,
    "imu": SensorKind.IMU_BUNDLE,
    "encoder": SensorKind.ENCODER_VELOCITY,
}


@dataclass
class ImuBias:
    """Random-walk biases of one IMU, stepped once per sample."""

    gyro: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw: float = 0.0

    def step(self, model: ImuModel, dt: float, rng: np.random.Generator) -> None:
        root = math.sqrt(dt)
        self.gyro = self.gyro + rng.normal(0.0, model.gyro_bias_walk * root, 3)
        self.accel = self.accel + rng.normal(0.0, model.accel_bias_walk * root, 3)
        self.yaw = self.yaw + float(rng.normal(0.0, model.yaw_bias_walk * root))


def device_rng(master_seed: int, device_id: str) -> np.random.Generator:
    """Independent generator for one device, stable across runs and platforms."""
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(zlib.crc32(device_id.encode("utf-8")),))
    return np.random.default_rng(seq)


def gps_available(d: DropoutSchedule, t: float) -> bool:
    """
    Whether the GPS signal is available at time t.

    The signal is lost while ((t - phase) mod period) lies in
    [period - outage, period).
    """
    phase = d.phase or 0.0
    r = math.fmod(t - phase, d.period)
    if r < 0.0:
        r += d.period
    return not (d.period - d.outage <= r < d.period)


def measure_gps(
    model: GpsModel,
    truth: VehicleState,
    t: float,
    rng: np.random.Generator,
    device_id: str = "gps",
    navsat: Optional[NavSatTransform] = None,
) -> Optional[SensorReading]:
    """
    Produce a GPS position reading in the odom frame.

    Args:
        model: Noise, rate, dropout and mounting of the antenna
        truth: Vehicle state at t
        t: Sample time on the device grid
        rng: Device RNG substream
        device_id: Id written into the reading
        navsat: When given, the noisy antenna position is exported as a
            latitude/longitude fix and brought back through UTM into odom

    Returns:
        The reading, or None while the signal is lost.
    """
    if not gps_available(model.dropout, t):
        return None

    antenna = truth.pose.position + truth.pose.rotation @ np.asarray(model.mount_offset, dtype=float)
    sigma = np.array([model.sigma_xy, model.sigma_xy, model.sigma_z])
    value = antenna + rng.normal(0.0, sigma)

    if model.outliers.probability > 0.0 and rng.random() < model.outliers.probability:
        heading = rng.uniform(-math.pi, math.pi)
        value = value + model.outliers.magnitude * np.array([math.cos(heading), math.sin(heading), 0.0])
        logger.debug(f"{device_id}: injected outlier at t={t:.2f}")

    if navsat is not None:
        lat, lon, alt = navsat.odom_to_fix((value[0], value[1], value[2]))
        value = np.array(navsat.fix_to_odom(lat, lon, alt))

    return SensorReading(device_id, t, SensorKind.GPS_POSITION, value, np.diag(sigma**2))


def measure_imu(
    model: ImuModel,
    truth: VehicleState,
    t: float,
    rng: np.random.Generator,
    bias: Optional[ImuBias] = None,
    device_id: str = "imu",
) -> SensorReading:
    """
    Produce an IMU bundle: absolute orientation, angular rate, acceleration.

    Biases (when ``bias`` is given) are stepped by one sample period before
    the reading is formed, and the reported covariance adds the variance the
    walks have accumulated by then. The accelerometer also sees the
    centripetal term of its mounting lever arm.
    """
    if bias is not None:
        bias.step(model, 1.0 / model.rate_hz, rng)
        gyro_bias, accel_bias, yaw_bias = bias.gyro, bias.accel, bias.yaw
    else:
        gyro_bias, accel_bias, yaw_bias = np.zeros(3), np.zeros(3), 0.0

    pose = truth.pose
    orientation = np.array([pose.roll, pose.pitch, pose.yaw + yaw_bias])
    orientation = orientation + rng.normal(0.0, model.sigma_orientation, 3)
    orientation = wrap_angle(orientation)

    lever = np.asarray(model.mount_offset, dtype=float)
    centripetal = np.cross(truth.w, np.cross(truth.w, lever))
    w = truth.w + gyro_bias + rng.normal(0.0, model.sigma_gyro, 3)
    a = truth.a + centripetal + accel_bias + rng.normal(0.0, model.sigma_accel, 3)

    drift = (t + 1.0 / model.rate_hz) if bias is not None else 0.0
    variances = np.array(
        [model.sigma_orientation**2] * 2
        + [model.sigma_orientation**2 + model.yaw_bias_walk**2 * drift]
        + [model.sigma_gyro**2 + model.gyro_bias_walk**2 * drift] * 3
        + [model.sigma_accel**2 + model.accel_bias_walk**2 * drift] * 3
    )
    return SensorReading(device_id, t, SensorKind.IMU_BUNDLE, np.concatenate([orientation, w, a]),
                         np.diag(variances))


def measure_encoder(
    model: EncoderModel,
    truth: VehicleState,
    t: float,
    rng: np.random.Generator,
    device_id: str = "encoder",
) -> SensorReading:
    """Forward speed with multiplicative and additive Gaussian noise."""
    speed = abs(float(truth.v[0]))
    rel, absolute = rng.normal(0.0, [model.sigma_speed_rel, model.sigma_speed_abs])
    value = speed * (1.0 + rel) + absolute
    variance = (model.sigma_speed_rel * value) ** 2 + model.sigma_speed_abs**2
    return SensorReading(device_id, t, SensorKind.ENCODER_VELOCITY, np.array([value]),
                         np.array([[variance]]))


def merge_streams(readings: Iterable[Sequence[SensorReading]]) -> List[SensorReading]:
    """
    Merge per-device streams into one time-ordered stream.

    Ties on t are broken by kind (gps < imu < encoder) and then device id.
    """
    merged = [r for stream in readings for r in stream]
    merged.sort(key=lambda r: (r.t, r.kind.priority, r.device_id))
    return merged


def sample_times(rate_hz: float, t_end: float) -> np.ndarray:
    """Device sampling grid k / rate_hz for every k with k / rate_hz <= t_end."""
    n = int(math.floor(t_end * rate_hz + 1e-9)) + 1
    return np.arange(n) / rate_hz


def simulate_device(
    device: Device,
    trajectory: Trajectory,
    master_seed: int,
    navsat: Optional[NavSatTransform] = None,
) -> List[SensorReading]:
    """
    Run one device over a whole trajectory.

    Truth is taken from the trajectory state nearest to each sample time.
    """
    rng = device_rng(master_seed, device.id)
    times = trajectory.times
    step = times[1] - times[0] if len(times) > 1 else 1.0
    readings: List[SensorReading] = []
    bias = ImuBias() if isinstance(device, ImuDevice) else None

    for t in sample_times(device.model.rate_hz, float(times[-1])):
        idx = min(int(round(t / step)), len(times) - 1)
        truth = trajectory.states[idx]
        t = float(t)
        if isinstance(device, GpsDevice):
            reading = measure_gps(device.model, truth, t, rng, device.id, navsat)
            if reading is not None:
                readings.append(reading)
        elif isinstance(device, ImuDevice):
            readings.append(measure_imu(device.model, truth, t, rng, bias, device.id))
        else:
            readings.append(measure_encoder(device.model, truth, t, rng, device.id))

    logger.debug(f"{device.id}: {len(readings)} readings")
    return readings


def record_all(
    devices: Sequence[Device],
    trajectory: Trajectory,
    master_seed: int,
    navsat: Optional[NavSatTransform] = None,
) -> Dict[str, List[SensorReading]]:
    """Simulate every device; returns per-device streams keyed by id."""
    return {d.id: simulate_device(d, trajectory, master_seed, navsat) for d in devices}
