"""
Ground-truth terrain map and the kinematic vehicle simulator.

The terrain map holds two independent layers of polygonal zones: rolling
resistance and slope. The simulator drives a single rigid-body reference
point through a waypoint script and samples the slope layer for pitch.
"""
import math
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

from config.logging_config import get_logger
from services.exceptions import InvalidArgumentError
from services.geo import Pose3, rotation_matrix, wrap_angle

logger = get_logger(__name__)

MAX_STEP = 0.1


def _segments_intersect(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if abs(v) < 1e-12 else (1 if v > 0 else -1)

    def on_segment(a, b, c):
        return min(a[0], b[0]) - 1e-12 <= c[0] <= max(a[0], b[0]) + 1e-12 and \
            min(a[1], b[1]) - 1e-12 <= c[1] <= max(a[1], b[1]) + 1e-12

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_segment(p1, p2, p3):
        return True
    if o2 == 0 and on_segment(p1, p2, p4):
        return True
    if o3 == 0 and on_segment(p3, p4, p1):
        return True
    return o4 == 0 and on_segment(p3, p4, p2)


def polygon_contains(vertices: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Crossing-number point-in-polygon test, vectorised over points.

    Edges are counted with the half-open rule (y_i > y) != (y_j > y) and a
    strict ``x < x_cross`` comparison, so left/bottom boundaries are inside
    and right/top boundaries are outside. Two zones sharing an edge therefore
    never both claim a point on it.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    inside = np.zeros(np.broadcast(x, y).shape, dtype=bool)
    xj, yj = vertices[-1]
    for xi, yi in vertices:
        straddles = (yi > y) != (yj > y)
        if np.any(straddles):
            with np.errstate(divide="ignore", invalid="ignore"):
                x_cross = xi + (y - yi) * (xj - xi) / (yj - yi)
            inside ^= straddles & (x < x_cross)
        xj, yj = xi, yi
    return inside


class Extent(BaseModel):
    """Axis-aligned bounding rectangle in odom meters."""

    model_config = ConfigDict(frozen=True)

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @model_validator(mode="after")
    def check_order(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("extent must have x_max > x_min and y_max > y_min")
        return self

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def contains(self, x, y):
        """Closed-rectangle membership, vectorised."""
        return (x >= self.x_min) & (x <= self.x_max) & (y >= self.y_min) & (y <= self.y_max)


class TerrainZone(BaseModel):
    """A simple polygon carrying a resistance coefficient or a slope."""

    model_config = ConfigDict(frozen=True)

    name: str = ""
    boundary: List[Tuple[float, float]] = Field(..., min_length=3)
    resistance_coeff: Optional[float] = Field(default=None, gt=0.0, lt=1.0)
    slope_deg: Optional[float] = Field(default=None, ge=0.0, lt=90.0)

    _vertices: np.ndarray = PrivateAttr()

    @field_validator("boundary")
    @classmethod
    def check_simple(cls, v):
        """Reject self-intersecting polygons."""
        pts = list(v)
        if len(pts) > 3 and pts[0] == pts[-1]:
            pts = pts[:-1]
        k = len(pts)
        if k < 3:
            raise ValueError("polygon needs at least 3 distinct vertices")
        for i in range(k):
            for j in range(i + 1, k):
                if j == i + 1 or (i == 0 and j == k - 1):
                    continue
                if _segments_intersect(pts[i], pts[(i + 1) % k], pts[j], pts[(j + 1) % k]):
                    raise ValueError(f"polygon edges {i} and {j} intersect")
        return pts

    def model_post_init(self, __context) -> None:
        self._vertices = np.asarray(self.boundary, dtype=float)

    @property
    def vertices(self) -> np.ndarray:
        return self._vertices

    def contains(self, x, y):
        return polygon_contains(self._vertices, x, y)


class GroundTruthMap(BaseModel):
    """
    Ground-truth resistance and slope layers over a rectangular site.

    Zones are looked up independently per layer; the first zone in list
    order containing a point wins, and points in no zone (or outside the
    extent) get the defaults.
    """

    model_config = ConfigDict(frozen=True)

    extent: Extent
    resistance_zones: List[TerrainZone] = Field(default_factory=list)
    slope_zones: List[TerrainZone] = Field(default_factory=list)
    default_resistance: float = Field(default=0.03, gt=0.0, lt=1.0)
    default_slope: float = Field(default=0.0, ge=0.0, lt=90.0)

    @model_validator(mode="after")
    def check_zones(self):
        for label, zones, attr in (
            ("resistance_zones", self.resistance_zones, "resistance_coeff"),
            ("slope_zones", self.slope_zones, "slope_deg"),
        ):
            for i, zone in enumerate(zones):
                if getattr(zone, attr) is None:
                    raise ValueError(f"{label}[{i}] ({zone.name}) has no {attr}")
                v = zone.vertices
                if not np.all(self.extent.contains(v[:, 0], v[:, 1])):
                    raise ValueError(f"{label}[{i}] ({zone.name}) leaves the map extent")
        return self

    def _layer(self, zones: Sequence[TerrainZone], attr: str, default: float, x, y) -> np.ndarray:
        values = np.full(np.broadcast(x, y).shape, default, dtype=float)
        claimed = ~self.extent.contains(x, y)
        for zone in zones:
            hit = zone.contains(x, y) & ~claimed
            values[hit] = getattr(zone, attr)
            claimed |= hit
        return values

    def sample_grid(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        """Vectorised lookup returning (resistance, slope_deg) arrays."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        resistance = self._layer(self.resistance_zones, "resistance_coeff",
                                 self.default_resistance, x, y)
        slope = self._layer(self.slope_zones, "slope_deg", self.default_slope, x, y)
        return resistance, slope


def sample_ground(ground: GroundTruthMap, x: float, y: float) -> Tuple[float, float]:
    """
    Look up the ground truth under a point.

    Args:
        ground: Ground-truth map
        x: Odom x in meters
        y: Odom y in meters

    Returns:
        (resistance coefficient, slope in degrees)
    """
    if not (math.isfinite(x) and math.isfinite(y)):
        raise InvalidArgumentError(f"sample_ground requires finite coordinates, got ({x}, {y})")
    resistance, slope = ground.sample_grid(np.array([x]), np.array([y]))
    return float(resistance[0]), float(slope[0])


@dataclass(frozen=True, eq=False)
class VehicleState:
    """Rigid-body kinematic state; v and a are body-frame, w is body angular rate."""

    pose: Pose3
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    a: np.ndarray = field(default_factory=lambda: np.zeros(3))
    t: float = 0.0


class DriveCommand(NamedTuple):
    target_speed: float
    target_yaw_rate: float


class WaypointScript(BaseModel):
    """Waypoints and motion limits replacing a human driver."""

    model_config = ConfigDict(frozen=True)

    waypoints: List[Tuple[float, float]] = Field(..., min_length=2)
    cruise_speed: float = Field(default=3.0, gt=0.0)
    max_yaw_rate: float = Field(default=0.5, ge=0.0)
    max_accel: float = Field(default=0.5, gt=0.0)
    reach_radius: float = Field(default=1.0, gt=0.0)
    lookahead: float = Field(default=8.0, gt=0.0)
    initial_yaw: Optional[float] = None
    time_cap: Optional[float] = Field(default=None, gt=0.0)

    @property
    def path_length(self) -> float:
        pts = np.asarray(self.waypoints, dtype=float)
        return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))

    def effective_time_cap(self) -> float:
        if self.time_cap is not None:
            return self.time_cap
        return 2.0 * self.path_length / self.cruise_speed + 30.0


@dataclass
class Trajectory:
    """Output of drive_waypoints; ``truncated`` is set when the time cap hit."""

    states: List[VehicleState]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.states)

    @property
    def times(self) -> np.ndarray:
        return np.array([s.t for s in self.states])

    @property
    def positions(self) -> np.ndarray:
        return np.array([[s.pose.x, s.pose.y, s.pose.z] for s in self.states])


def slope_pitch(slope_deg: float) -> float:
    """Nose-up pitch for a climb of ``slope_deg``; negative under Z-Y-X Euler angles."""
    return -math.radians(slope_deg)


def _euler_rates(roll: float, pitch: float) -> np.ndarray:
    cr, sr = math.cos(roll), math.sin(roll)
    cp, tp = math.cos(pitch), math.tan(pitch)
    return np.array([[1.0, sr * tp, cr * tp], [0.0, cr, -sr], [0.0, sr / cp, cr / cp]])


def step_vehicle(
    s: VehicleState,
    cmd: DriveCommand,
    dt: float,
    limits: WaypointScript,
    ground: Optional[GroundTruthMap] = None,
) -> VehicleState:
    """
    Advance the kinematic vehicle by one step.

    Forward speed slews toward the target bounded by ``max_accel``; yaw rate
    takes the target clipped to ``max_yaw_rate``. Position moves by R(pose)
    applied to v*dt + a*dt^2/2, the same displacement the filters predict.
    Pitch is read from the slope layer as a nose-up attitude, which is
    negative under R = Rz Ry Rx, so the vehicle climbs on a slope zone.

    Raises:
        InvalidArgumentError: If dt is not in (0, 0.1].
    """
    if not (0.0 < dt <= MAX_STEP):
        raise InvalidArgumentError(f"dt must be in (0, {MAX_STEP}], got {dt}")

    v_fwd = float(s.v[0])
    accel = min(max((cmd.target_speed - v_fwd) / dt, -limits.max_accel), limits.max_accel)
    yaw_rate = min(max(cmd.target_yaw_rate, -limits.max_yaw_rate), limits.max_yaw_rate)

    pose = s.pose
    step = np.array([v_fwd * dt + 0.5 * accel * dt * dt, 0.0, 0.0])
    disp = rotation_matrix(pose.roll, pose.pitch, pose.yaw) @ step

    w = np.array([0.0, 0.0, yaw_rate])
    rates = _euler_rates(pose.roll, pose.pitch) @ w
    x, y, z = pose.x + disp[0], pose.y + disp[1], pose.z + disp[2]

    pitch = pose.pitch + rates[1] * dt
    if ground is not None:
        _, slope = sample_ground(ground, x, y)
        pitch = slope_pitch(slope)

    return VehicleState(
        pose=Pose3(x, y, z, pose.roll + rates[0] * dt, pitch, wrap_angle(pose.yaw + rates[2] * dt)),
        v=np.array([v_fwd + accel * dt, 0.0, 0.0]),
        w=w,
        a=np.array([accel, 0.0, 0.0]),
        t=s.t + dt,
    )


def drive_waypoints(ground: GroundTruthMap, script: WaypointScript, dt: float) -> Trajectory:
    """
    Drive the waypoint script with pure-pursuit steering.

    Args:
        ground: Ground-truth map supplying the slope under the vehicle
        script: Waypoints, speeds and limits
        dt: Integration step in seconds, in (0, 0.1]

    Returns:
        Trajectory with one state per step starting at t = 0. When the time
        cap expires before the last waypoint the trajectory is returned with
        ``truncated`` set.

    Raises:
        InvalidArgumentError: If dt is out of range or a waypoint is off the map.
    """
    if not (0.0 < dt <= MAX_STEP):
        raise InvalidArgumentError(f"dt must be in (0, {MAX_STEP}], got {dt}")
    pts = np.asarray(script.waypoints, dtype=float)
    if not np.all(ground.extent.contains(pts[:, 0], pts[:, 1])):
        raise InvalidArgumentError("all waypoints must lie within the map extent")

    x0, y0 = pts[0]
    if script.initial_yaw is not None:
        yaw0 = script.initial_yaw
    else:
        yaw0 = math.atan2(pts[1, 1] - y0, pts[1, 0] - x0)
    _, slope0 = sample_ground(ground, x0, y0)
    state = VehicleState(pose=Pose3(x0, y0, 0.0, 0.0, slope_pitch(slope0), yaw0))

    states = [state]
    target = 1
    cap_steps = int(math.ceil(script.effective_time_cap() / dt))
    truncated = True

    for k in range(1, cap_steps + 1):
        while target < len(pts) and math.hypot(
            pts[target, 0] - state.pose.x, pts[target, 1] - state.pose.y
        ) <= script.reach_radius:
            target += 1
        if target >= len(pts):
            truncated = False
            break

        dx = pts[target, 0] - state.pose.x
        dy = pts[target, 1] - state.pose.y
        dist = math.hypot(dx, dy)
        alpha = wrap_angle(math.atan2(dy, dx) - state.pose.yaw)
        look = max(min(dist, script.lookahead), script.reach_radius)
        yaw_rate = 2.0 * script.cruise_speed * math.sin(alpha) / look

        state = step_vehicle(state, DriveCommand(script.cruise_speed, yaw_rate), dt, script, ground)
        # timestamps stay on the k * dt grid
        state = VehicleState(pose=state.pose, v=state.v, w=state.w, a=state.a, t=k * dt)
        states.append(state)
    else:
        truncated = target < len(pts)

    if truncated:
        logger.warning(
            f"Waypoint {target} not reached within {script.effective_time_cap():.1f} s; "
            f"trajectory truncated"
        )
    else:
        logger.info(f"Drove {len(pts)} waypoints in {states[-1].t:.1f} s ({len(states)} states)")
    return Trajectory(states=states, truncated=truncated)
