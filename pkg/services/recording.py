"""
Binary sensor recordings.

A recording carries everything needed to re-run filtering without
re-simulating: the master seed, the device table, the scenario document,
the truth trajectory and the merged reading stream. All numbers are
little-endian; readings are length-prefixed frames.
"""
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from config.logging_config import get_logger
from services.exceptions import IncompatibleRecordingError, RecordingFormatError
from services.geo import Pose3
from services.sensors import SensorKind, SensorReading
from services.world import Trajectory, VehicleState

logger = get_logger(__name__)

RECORDING_MAGIC = b"TFSR"
RECORDING_VERSION = 1

# magic, version, flags, master seed, device count
_HEADER = struct.Struct("<4sHHQH")
_DEVICE = struct.Struct("<BH")  # kind code, id length; then id bytes and 3 f64 mount
_MOUNT = struct.Struct("<3d")
_BLOCK = struct.Struct("<I")
_FRAME = struct.Struct("<IHd")  # frame length, device index, t

FLAG_TRUNCATED = 0x1
TRUTH_COLUMNS = 16


@dataclass(frozen=True)
class DeviceEntry:
    id: str
    kind: SensorKind
    mount_offset: Tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass(eq=False)
class Recording:
    seed: int
    devices: List[DeviceEntry]
    scenario_yaml: str
    truth: Trajectory
    readings: List[SensorReading] = field(default_factory=list)

    def device(self, device_id: str) -> DeviceEntry:
        for entry in self.devices:
            if entry.id == device_id:
                return entry
        raise KeyError(device_id)


def truth_array(trajectory: Trajectory) -> np.ndarray:
    """(N, 16) rows of t, position, Euler angles, v, w, a."""
    rows = np.empty((len(trajectory), TRUTH_COLUMNS))
    for k, s in enumerate(trajectory.states):
        p = s.pose
        rows[k, 0:7] = (s.t, p.x, p.y, p.z, p.roll, p.pitch, p.yaw)
        rows[k, 7:10] = s.v
        rows[k, 10:13] = s.w
        rows[k, 13:16] = s.a
    return rows


def trajectory_from_array(rows: np.ndarray, truncated: bool = False) -> Trajectory:
    states = [
        VehicleState(
            pose=Pose3(*(float(v) for v in r[1:7])),
            v=r[7:10].copy(),
            w=r[10:13].copy(),
            a=r[13:16].copy(),
            t=float(r[0]),
        )
        for r in rows
    ]
    return Trajectory(states=states, truncated=truncated)


def encode_recording(rec: Recording) -> bytes:
    index = {entry.id: k for k, entry in enumerate(rec.devices)}
    flags = FLAG_TRUNCATED if rec.truth.truncated else 0
    parts = [_HEADER.pack(RECORDING_MAGIC, RECORDING_VERSION, flags, rec.seed, len(rec.devices))]

    for entry in rec.devices:
        name = entry.id.encode("utf-8")
        parts.append(_DEVICE.pack(entry.kind.code, len(name)))
        parts.append(name)
        parts.append(_MOUNT.pack(*entry.mount_offset))

    doc = rec.scenario_yaml.encode("utf-8")
    parts.append(_BLOCK.pack(len(doc)))
    parts.append(doc)

    truth = np.ascontiguousarray(truth_array(rec.truth), dtype="<f8")
    parts.append(_BLOCK.pack(len(truth)))
    parts.append(truth.tobytes())

    for r in rec.readings:
        payload = np.concatenate([r.value, r.noise_cov.ravel()]).astype("<f8").tobytes()
        parts.append(_FRAME.pack(_FRAME.size - 4 + len(payload), index[r.device_id], r.t))
        parts.append(payload)
    return b"".join(parts)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.offset = 0

    def take(self, fmt: struct.Struct, what: str) -> tuple:
        if self.offset + fmt.size > len(self.blob):
            raise RecordingFormatError(f"truncated {what}", self.offset)
        values = fmt.unpack_from(self.blob, self.offset)
        self.offset += fmt.size
        return values

    def raw(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.blob):
            raise RecordingFormatError(f"truncated {what}", self.offset)
        chunk = self.blob[self.offset:self.offset + size]
        self.offset += size
        return chunk


def decode_recording(blob: bytes) -> Recording:
    """
    Parse a recording.

    Raises:
        IncompatibleRecordingError: If the header carries another format version
        RecordingFormatError: On any malformed content, with its byte offset
    """
    reader = _Reader(blob)
    magic, version, flags, seed, count = reader.take(_HEADER, "header")
    if magic != RECORDING_MAGIC:
        raise RecordingFormatError(f"bad magic {magic!r}", 0)
    if version != RECORDING_VERSION:
        raise IncompatibleRecordingError(
            f"recording version {version}, this build reads version {RECORDING_VERSION}", 4
        )

    devices: List[DeviceEntry] = []
    for _ in range(count):
        start = reader.offset
        code, length = reader.take(_DEVICE, "device table")
        try:
            kind = SensorKind.from_code(code)
            name = reader.raw(length, "device id").decode("utf-8")
        except (ValueError, UnicodeDecodeError) as e:
            raise RecordingFormatError(str(e), start) from None
        devices.append(DeviceEntry(name, kind, reader.take(_MOUNT, "mount offset")))

    (doc_len,) = reader.take(_BLOCK, "scenario block")
    start = reader.offset
    try:
        scenario_yaml = reader.raw(doc_len, "scenario block").decode("utf-8")
    except UnicodeDecodeError:
        raise RecordingFormatError("scenario block is not UTF-8", start) from None

    (rows,) = reader.take(_BLOCK, "truth block")
    truth_bytes = reader.raw(rows * TRUTH_COLUMNS * 8, "truth block")
    truth = np.frombuffer(truth_bytes, dtype="<f8").reshape(rows, TRUTH_COLUMNS).astype(float)

    readings: List[SensorReading] = []
    while reader.offset < len(blob):
        start = reader.offset
        length, device, t = reader.take(_FRAME, "frame header")
        if device >= len(devices):
            raise RecordingFormatError(f"frame names device {device} of {len(devices)}", start)
        entry = devices[device]
        dim = entry.kind.dim
        expected = _FRAME.size - 4 + 8 * (dim + dim * dim)
        if length != expected:
            raise RecordingFormatError(f"frame length {length}, expected {expected} for {entry.kind.value}", start)
        payload = np.frombuffer(reader.raw(8 * (dim + dim * dim), "frame payload"), dtype="<f8").astype(float)
        readings.append(SensorReading(entry.id, t, entry.kind, payload[:dim].copy(),
                                      payload[dim:].reshape(dim, dim).copy()))

    return Recording(seed, devices, scenario_yaml, trajectory_from_array(truth, bool(flags & FLAG_TRUNCATED)),
                     readings)


def write_recording(rec: Recording, path: Union[str, Path]) -> None:
    blob = encode_recording(rec)
    Path(path).write_bytes(blob)
    logger.info(f"Wrote recording {path}: {len(rec.readings)} readings, {len(blob)} bytes")


def read_recording(path: Union[str, Path]) -> Recording:
    return decode_recording(Path(path).read_bytes())


def mask_readings(readings: Sequence[SensorReading], active: Sequence[str]) -> List[SensorReading]:
    """Readings of the active devices only, order preserved."""
    keep = set(active)
    return [r for r in readings if r.device_id in keep]
