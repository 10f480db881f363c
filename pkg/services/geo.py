"""
Coordinate frames, angle handling and the UTM <-> odom homogeneous transforms.

The odom frame is the vehicle's world frame with its origin at the first
reported position. A fix is carried into odom by projecting it to UTM and
applying the inverse of the datum transform built from the vehicle's initial
UTM-frame pose.
"""
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from config.logging_config import get_logger
from services.exceptions import (
    FrameMismatchError,
    InvalidArgumentError,
    UnsupportedRegionError,
)

logger = get_logger(__name__)

ArrayLike = Union[float, np.ndarray]

TWO_PI = 2.0 * math.pi

# WGS-84
WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
UTM_K0 = 0.9996
UTM_FALSE_EASTING = 500000.0
UTM_FALSE_NORTHING_SOUTH = 10000000.0
UTM_MAX_LATITUDE = 84.0
UTM_MIN_LATITUDE = -84.0

_N = WGS84_F / (2.0 - WGS84_F)
_A_RECT = WGS84_A / (1.0 + _N) * (1.0 + _N**2 / 4.0 + _N**4 / 64.0)
_ALPHA = (
    _N / 2.0 - 2.0 * _N**2 / 3.0 + 5.0 * _N**3 / 16.0,
    13.0 * _N**2 / 48.0 - 3.0 * _N**3 / 5.0,
    61.0 * _N**3 / 240.0,
)
_BETA = (
    _N / 2.0 - 2.0 * _N**2 / 3.0 + 37.0 * _N**3 / 96.0,
    _N**2 / 48.0 + _N**3 / 15.0,
    17.0 * _N**3 / 480.0,
)
_DELTA = (
    2.0 * _N - 2.0 * _N**2 / 3.0 - 2.0 * _N**3,
    7.0 * _N**2 / 3.0 - 8.0 * _N**3 / 5.0,
    56.0 * _N**3 / 15.0,
)
_CONFORMAL = 2.0 * math.sqrt(_N) / (1.0 + _N)


def wrap_angle(a: ArrayLike) -> ArrayLike:
    """
    Wrap an angle (or array of angles) into (-pi, pi].

    Values already inside the interval are returned untouched, which keeps
    the operation exactly idempotent.

    Args:
        a: Angle in radians.

    Returns:
        Congruent angle in (-pi, pi].

    Raises:
        InvalidArgumentError: If any input is NaN or infinite.
    """
    if isinstance(a, np.ndarray):
        if not np.all(np.isfinite(a)):
            raise InvalidArgumentError("wrap_angle requires finite input")
        inside = (a > -math.pi) & (a <= math.pi)
        if np.all(inside):
            return a
        wrapped = np.mod(a + math.pi, TWO_PI) - math.pi
        wrapped = np.where(wrapped <= -math.pi, math.pi, wrapped)
        return np.where(inside, a, wrapped)

    a = float(a)
    if not math.isfinite(a):
        raise InvalidArgumentError(f"wrap_angle requires finite input, got {a}")
    if -math.pi < a <= math.pi:
        return a
    wrapped = math.fmod(a + math.pi, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    wrapped -= math.pi
    return math.pi if wrapped <= -math.pi else wrapped


def rotation_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Fixed-axis roll-pitch-yaw rotation R = Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


@dataclass(frozen=True)
class Pose3:
    """Position in meters and fixed-axis Euler angles in radians."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("roll", "pitch", "yaw"):
            object.__setattr__(self, name, wrap_angle(getattr(self, name)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.roll, self.pitch, self.yaw)


@dataclass(frozen=True)
class UtmPoint:
    """A UTM coordinate; altitude is carried through unchanged."""

    easting: float
    northing: float
    altitude: float
    zone: int
    northern: bool = True

    def __post_init__(self):
        if not 1 <= self.zone <= 60:
            raise InvalidArgumentError(f"UTM zone must be in [1, 60], got {self.zone}")

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.easting, self.northing, self.altitude])


@dataclass(frozen=True, eq=False)
class HomogeneousTransform:
    """
    Rigid 4x4 transform from odom into UTM.

    Attributes:
        matrix: The 4x4 matrix; bottom row [0, 0, 0, 1], orthonormal rotation.
        zone: UTM zone the translation is expressed in, or None when unknown.
        northern: Hemisphere flag paired with ``zone``.
    """

    matrix: np.ndarray
    zone: Optional[int] = None
    northern: bool = True
    _inverse: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (4, 4):
            raise InvalidArgumentError(f"transform must be 4x4, got {m.shape}")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvalidArgumentError("transform bottom row must be [0, 0, 0, 1]")
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-9) or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvalidArgumentError("transform rotation block is not a proper rotation")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

        inv = np.eye(4)
        inv[:3, :3] = r.T
        inv[:3, 3] = -r.T @ m[:3, 3]
        inv.setflags(write=False)
        object.__setattr__(self, "_inverse", inv)

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    def inverse(self) -> np.ndarray:
        """Return T^-1 using the rigid-body closed form."""
        return self._inverse


def build_utm_transform(
    initial_utm_pose: Pose3, zone: Optional[int] = None, northern: bool = True
) -> HomogeneousTransform:
    """
    Build the odom -> UTM transform from the vehicle's initial UTM-frame pose.

    The rotation block is the standard ZYX expansion; entry (1, 3) is
    c(roll)c(yaw)s(pitch) + s(roll)s(yaw).

    Args:
        initial_utm_pose: Pose whose position is the first reported fix in UTM
            and whose angles are the vehicle's initial UTM-frame attitude.
        zone: UTM zone of the pose, used to reject points from another zone.
        northern: Hemisphere flag for ``zone``.

    Returns:
        The homogeneous transform T.
    """
    m = np.eye(4)
    m[:3, :3] = initial_utm_pose.rotation
    m[:3, 3] = initial_utm_pose.position
    return HomogeneousTransform(m, zone=zone, northern=northern)


def _check_zone(t: HomogeneousTransform, p: UtmPoint) -> None:
    if t.zone is not None and (p.zone != t.zone or p.northern != t.northern):
        raise FrameMismatchError(
            f"point in zone {p.zone}{'N' if p.northern else 'S'} but transform "
            f"origin in zone {t.zone}{'N' if t.northern else 'S'}"
        )


def utm_to_odom(t: HomogeneousTransform, p: UtmPoint) -> Tuple[float, float, float]:
    """
    Map a UTM point into the odom frame with T^-1.

    Raises:
        FrameMismatchError: If the point's zone differs from the transform's.
    """
    _check_zone(t, p)
    q = t.inverse() @ np.array([p.easting, p.northing, p.altitude, 1.0])
    return float(q[0]), float(q[1]), float(q[2])


def odom_to_utm(t: HomogeneousTransform, q: Tuple[float, float, float]) -> UtmPoint:
    """Map an odom-frame point into UTM with T."""
    if t.zone is None:
        raise FrameMismatchError("transform carries no UTM zone; cannot build a UtmPoint")
    p = t.matrix @ np.array([q[0], q[1], q[2], 1.0])
    return UtmPoint(float(p[0]), float(p[1]), float(p[2]), t.zone, t.northern)


def utm_zone(lat: float, lon: float) -> int:
    """UTM zone number including the Norway and Svalbard exceptions."""
    zone = int(math.floor((lon + 180.0) / 6.0)) + 1
    if 56.0 <= lat < 64.0 and 3.0 <= lon < 12.0:
        return 32
    if 72.0 <= lat < 84.0 and lon >= 0.0:
        if lon < 9.0:
            return 31
        if lon < 21.0:
            return 33
        if lon < 33.0:
            return 35
        if lon < 42.0:
            return 37
    return min(zone, 60)


def central_meridian(zone: int) -> float:
    """Central meridian of a zone in degrees."""
    return -183.0 + 6.0 * zone


def latlon_to_utm(lat: float, lon: float, alt: float = 0.0) -> UtmPoint:
    """
    Project WGS-84 latitude/longitude to UTM with the Transverse Mercator series.

    Args:
        lat: Latitude in degrees, within [-84, 84].
        lon: Longitude in degrees, within [-180, 180).
        alt: Altitude in meters, passed through untouched.

    Returns:
        The UTM point.

    Raises:
        UnsupportedRegionError: If the position is outside the UTM latitude band
            or the longitude range.
    """
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise UnsupportedRegionError(f"non-finite coordinates ({lat}, {lon})")
    if not UTM_MIN_LATITUDE <= lat <= UTM_MAX_LATITUDE:
        raise UnsupportedRegionError(f"latitude {lat} outside the UTM band")
    if not -180.0 <= lon < 180.0:
        raise UnsupportedRegionError(f"longitude {lon} outside [-180, 180)")

    zone = utm_zone(lat, lon)
    phi = math.radians(lat)
    dlam = math.radians(lon - central_meridian(zone))

    sin_phi = math.sin(phi)
    t = math.sinh(math.atanh(sin_phi) - _CONFORMAL * math.atanh(_CONFORMAL * sin_phi))
    xi_p = math.atan2(t, math.cos(dlam))
    eta_p = math.atanh(math.sin(dlam) / math.sqrt(1.0 + t * t))

    xi, eta = xi_p, eta_p
    for j, alpha in enumerate(_ALPHA, start=1):
        xi += alpha * math.sin(2 * j * xi_p) * math.cosh(2 * j * eta_p)
        eta += alpha * math.cos(2 * j * xi_p) * math.sinh(2 * j * eta_p)

    easting = UTM_FALSE_EASTING + UTM_K0 * _A_RECT * eta
    northing = UTM_K0 * _A_RECT * xi
    northern = lat >= 0.0
    if not northern:
        northing += UTM_FALSE_NORTHING_SOUTH
    return UtmPoint(easting, northing, alt, zone, northern)


def utm_to_latlon(p: UtmPoint) -> Tuple[float, float, float]:
    """Inverse Transverse Mercator projection; returns (lat, lon, alt) in degrees/meters."""
    northing = p.northing if p.northern else p.northing - UTM_FALSE_NORTHING_SOUTH
    xi = northing / (UTM_K0 * _A_RECT)
    eta = (p.easting - UTM_FALSE_EASTING) / (UTM_K0 * _A_RECT)

    xi_p, eta_p = xi, eta
    for j, beta in enumerate(_BETA, start=1):
        xi_p -= beta * math.sin(2 * j * xi) * math.cosh(2 * j * eta)
        eta_p -= beta * math.cos(2 * j * xi) * math.sinh(2 * j * eta)

    chi = math.asin(math.sin(xi_p) / math.cosh(eta_p))
    phi = chi
    for j, delta in enumerate(_DELTA, start=1):
        phi += delta * math.sin(2 * j * chi)

    lon = central_meridian(p.zone) + math.degrees(math.atan2(math.sinh(eta_p), math.cos(xi_p)))
    return math.degrees(phi), lon, p.altitude


class NavSatTransform:
    """
    Converts GPS fixes to odom coordinates through UTM.

    The datum fixes the odom origin (latitude, longitude, altitude of the
    first reported position) and the vehicle's initial UTM-frame attitude.
    """

    def __init__(self, lat: float, lon: float, alt: float = 0.0, roll: float = 0.0,
                 pitch: float = 0.0, yaw: float = 0.0):
        origin = latlon_to_utm(lat, lon, alt)
        self.zone = origin.zone
        self.northern = origin.northern
        self.transform = build_utm_transform(
            Pose3(origin.easting, origin.northing, origin.altitude, roll, pitch, yaw),
            zone=origin.zone,
            northern=origin.northern,
        )
        logger.debug(
            f"Datum at ({lat:.7f}, {lon:.7f}) -> zone {self.zone}"
            f"{'N' if self.northern else 'S'} E={origin.easting:.3f} N={origin.northing:.3f}"
        )

    def odom_to_fix(self, q: Tuple[float, float, float]) -> Tuple[float, float, float]:
        """Express an odom-frame point as a (lat, lon, alt) fix."""
        return utm_to_latlon(odom_to_utm(self.transform, q))

    def fix_to_odom(self, lat: float, lon: float, alt: float) -> Tuple[float, float, float]:
        """Project a fix into UTM and then into odom.

        Raises:
            FrameMismatchError: If the fix falls in another UTM zone than the datum.
        """
        return utm_to_odom(self.transform, latlon_to_utm(lat, lon, alt))
