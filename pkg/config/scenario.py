"""
Scenario configuration: world, driving script, devices, filter and study.

Scenarios are YAML documents validated into ScenarioConfig. Every problem
is reported with the dotted path where it was found.
"""
import hashlib
from pathlib import Path
from typing import Annotated, Dict, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from config.logging_config import get_logger
from services.exceptions import ScenarioValidationError
from services.fusion import FilterConfig
from services.sensors import EncoderDevice, GpsDevice, ImuDevice
from services.world import GroundTruthMap, WaypointScript

logger = get_logger(__name__)

MAX_GPS = 3
MAX_IMU = 3
MAX_ENCODER = 1
DROPOUT_PHASE_STEP = 3.3

DeviceConfig = Annotated[Union[GpsDevice, ImuDevice, EncoderDevice], Field(discriminator="type")]


class DatumConfig(BaseModel):
    """Geodetic pose of the odom origin, used for the GPS fix round trip."""

    latitude: float = Field(default=51.0, ge=-84.0, le=84.0)
    longitude: float = Field(default=7.0, ge=-180.0, le=180.0)
    altitude: float = 0.0
    yaw: float = 0.0


class SimulationConfig(BaseModel):
    dt: float = Field(default=0.01, gt=0.0, le=0.1)
    datum: DatumConfig = Field(default_factory=DatumConfig)
    navsat: bool = Field(default=True, description="Pass GPS fixes through latitude/longitude")


class SensorGroup(BaseModel):
    """One row of the sensor activation matrix."""

    id: int = Field(..., ge=1)
    filter: Optional[Literal["ekf", "ukf"]] = None
    gps: List[str] = Field(default_factory=list)
    imu: List[str] = Field(default_factory=list)
    encoder: List[str] = Field(default_factory=list)

    @property
    def devices(self) -> List[str]:
        return [*self.gps, *self.imu, *self.encoder]


class StudyConfig(BaseModel):
    groups: List[SensorGroup] = Field(..., min_length=1)
    seeds: List[Annotated[int, Field(ge=0)]] = Field(..., min_length=1)


class OutputConfig(BaseModel):
    directory: Optional[str] = None
    rate_hz: Optional[float] = Field(default=None, gt=0.0, description="Filter output grid rate")
    trajectories: bool = True
    maps: bool = True
    images: bool = True
    recording: bool = True


class ScenarioConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "scenario"
    world: GroundTruthMap
    script: WaypointScript
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    sensors: List[DeviceConfig] = Field(..., min_length=1)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    study: StudyConfig
    outputs: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def check_references(self):
        violations = self._cross_violations()
        if violations:
            raise ValueError("\n".join(violations))
        self._default_dropout_phases()
        return self

    def _cross_violations(self) -> List[str]:
        out: List[str] = []
        kinds: Dict[str, str] = {}
        for i, device in enumerate(self.sensors):
            if device.id in kinds:
                out.append(f"sensors.{i}.id: device id {device.id!r} defined more than once")
            kinds[device.id] = device.type

        counts = {kind: sum(1 for t in kinds.values() if t == kind) for kind in ("gps", "imu", "encoder")}
        for kind, limit in (("gps", MAX_GPS), ("imu", MAX_IMU), ("encoder", MAX_ENCODER)):
            if counts[kind] > limit:
                out.append(f"sensors: {counts[kind]} {kind} devices defined, at most {limit} supported")

        seen_groups = set()
        for g, group in enumerate(self.study.groups):
            if group.id in seen_groups:
                out.append(f"study.groups.{g}.id: group id {group.id} is not unique")
            seen_groups.add(group.id)
            for kind in ("gps", "imu", "encoder"):
                for k, ref in enumerate(getattr(group, kind)):
                    path = f"study.groups.{g}.{kind}.{k}"
                    if ref not in kinds:
                        out.append(f"{path}: unknown device id {ref!r}")
                    elif kinds[ref] != kind:
                        out.append(f"{path}: device {ref!r} is a {kinds[ref]}, not a {kind}")
            if len(set(group.devices)) != len(group.devices):
                out.append(f"study.groups.{g}: a device is listed twice")
            if not group.devices:
                out.append(f"study.groups.{g}: group activates no devices")
        return out

    def _default_dropout_phases(self) -> None:
        for index, device in enumerate(d for d in self.sensors if isinstance(d, GpsDevice)):
            dropout = device.model.dropout
            if dropout.phase is None:
                phase = index * DROPOUT_PHASE_STEP
                device.model = device.model.model_copy(
                    update={"dropout": dropout.model_copy(update={"phase": phase})}
                )

    def device(self, device_id: str):
        for device in self.sensors:
            if device.id == device_id:
                return device
        raise KeyError(device_id)

    def group(self, group_id: int) -> SensorGroup:
        for group in self.study.groups:
            if group.id == group_id:
                return group
        raise KeyError(group_id)

    def group_filter(self, group: SensorGroup) -> str:
        return group.filter or self.filter.kind

    def gps_mounts(self) -> Dict[str, tuple]:
        return {d.id: tuple(d.model.mount_offset) for d in self.sensors if isinstance(d, GpsDevice)}


def _violations(error: ValidationError) -> List[str]:
    out = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"])
        message = item["msg"]
        if message.startswith("Value error, "):
            message = message[len("Value error, "):]
        for line in message.splitlines():
            out.append(line if not path else f"{path}: {line}")
    return out


def scenario_from_yaml(text: str, source: Optional[str] = None) -> ScenarioConfig:
    """
    Parse and validate a scenario document.

    Raises:
        ScenarioValidationError: Listing every violation found
    """
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ScenarioValidationError([f"yaml: {e}"], source) from e
    if not isinstance(data, dict):
        raise ScenarioValidationError(["document must be a mapping of sections"], source)
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        raise ScenarioValidationError(_violations(e), source) from e


def load_scenario(path: Union[str, Path]) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ScenarioValidationError([f"cannot read config: {e}"], str(path)) from e
    config = scenario_from_yaml(text, str(path))
    logger.info(f"Loaded scenario {config.name!r} from {path}: "
                f"{len(config.sensors)} devices, {len(config.study.groups)} groups, "
                f"{len(config.study.seeds)} seeds")
    return config


def config_hash(text: str) -> str:
    """Short content hash used in run directory names."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:10]
