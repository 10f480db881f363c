"""
Scenario runner: simulate once per seed, filter every sensor group against
the shared recording, plot the terrain map and evaluate.
"""
import threading
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from config.logging_config import get_logger
from config.scenario import ScenarioConfig, SensorGroup, config_hash, load_scenario, scenario_from_yaml
from services.exceptions import PartialArtifactError, ScenarioValidationError
from services.fusion import initial_estimate, run_filter
from services.geo import NavSatTransform
from services.gridmap import (
    MapLayer,
    MultiLayerGridMap,
    export_layers,
    export_mask,
    load_map,
    rasterize_truth,
    run_plotter,
)
from services.metrics import (
    GroupResult,
    MapErrorReport,
    align_truth,
    errors_frame,
    map_error_rate,
    mispredict_mask,
    summarize_study,
    trajectory_error,
    trajectory_frame,
)
from services.recording import (
    DeviceEntry,
    Recording,
    decode_recording,
    encode_recording,
    mask_readings,
    read_recording,
)
from services.sensors import DEVICE_KIND, GpsDevice, ImuDevice, merge_streams, record_all
from services.world import drive_waypoints

logger = get_logger(__name__)

DEFAULT_OUTPUT_RATE_HZ = 10.0
RECORDING_NAME = "recording.tfsr"


@dataclass
class RunResult:
    run_dir: Path
    results: List[GroupResult] = field(default_factory=list)
    failed: List[str] = field(default_factory=list)


class ProgressLog:
    """Append-only progress file shared by everything reporting on one run."""

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()

    def write(self, message: str) -> None:
        stamp = datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
        with self._lock, open(self.path, "a", encoding="utf-8") as f:
            f.write(f"{stamp} {message}\n")


def simulate_seed(config: ScenarioConfig, seed: int, scenario_yaml: str = "") -> Recording:
    """Drive the script once and record every device with the given master seed."""
    sim = config.simulation
    trajectory = drive_waypoints(config.world, config.script, sim.dt)
    navsat = None
    if sim.navsat:
        navsat = NavSatTransform(sim.datum.latitude, sim.datum.longitude, sim.datum.altitude,
                                 yaw=sim.datum.yaw)
    streams = record_all(config.sensors, trajectory, seed, navsat)
    devices = [
        DeviceEntry(
            d.id,
            DEVICE_KIND[d.type],
            tuple(d.model.mount_offset) if isinstance(d, (GpsDevice, ImuDevice)) else (0.0, 0.0, 0.0),
        )
        for d in config.sensors
    ]
    readings = merge_streams(streams[d.id] for d in config.sensors)
    logger.info(f"seed {seed}: {len(trajectory)} truth states, {len(readings)} readings")
    return Recording(seed, devices, scenario_yaml, trajectory, readings)


def group_dir_name(group: SensorGroup, kind: str) -> str:
    return f"group-{group.id:02d}-{kind}"


def run_group(
    rec: Recording,
    config: ScenarioConfig,
    group: SensorGroup,
    out_dir: Optional[Path] = None,
    output_rate_hz: Optional[float] = None,
) -> GroupResult:
    """
    Filter one group's masked readings, build its map and score it.

    Args:
        rec: Shared recording for this seed
        config: Scenario the recording was made from
        group: Sensor group selecting the active devices and filter
        out_dir: Where to write per-group artifacts; nothing is written when None
        output_rate_hz: Filter output grid rate

    Returns:
        The group's trajectory and map errors
    """
    rate = output_rate_hz or config.outputs.rate_hz or DEFAULT_OUTPUT_RATE_HZ
    kind = config.group_filter(group)
    readings = mask_readings(rec.readings, group.devices)
    truth_t = rec.truth.times
    truth_xyz = rec.truth.positions

    init = initial_estimate(readings, config.filter, t0=float(truth_t[0]), mounts=config.gps_mounts())
    estimates = run_filter(
        kind, config.filter, readings, init,
        output_rate_hz=rate, end_time=float(truth_t[-1]), mounts=config.gps_mounts(),
    )
    on_grid = [e for e in estimates if e.on_grid]
    t = np.array([e.t for e in on_grid])
    est_xyz = np.array([e.x[0:3] for e in on_grid]).reshape(-1, 3)
    aligned = align_truth(truth_t, truth_xyz, t)

    error = trajectory_error(np.column_stack([t, est_xyz[:, :2]]), np.column_stack([t, aligned[:, :2]]))
    grid = MultiLayerGridMap.from_extent(config.world.extent)
    run_plotter(aligned[:, :2], est_xyz[:, :2], config.world, grid)
    report = map_error_rate(grid, config.world)

    result = GroupResult(
        group=group.id, filter=kind, gps_count=len(group.gps), imu_count=len(group.imu),
        encoder=bool(group.encoder), seed=rec.seed, error=error, map_report=report,
    )
    if out_dir is not None:
        write_group_artifacts(out_dir, config, t, aligned, est_xyz, result, grid)
    logger.info(
        f"seed {rec.seed} group {group.id} ({kind}): net RMSE {error.net_rmse:.3f} m, "
        f"J_r {report.J_r:.4f}, J_s {report.J_s:.4f}"
    )
    return result


def write_group_artifacts(
    out_dir: Path,
    config: ScenarioConfig,
    t: np.ndarray,
    truth_xyz: np.ndarray,
    est_xyz: np.ndarray,
    result: GroupResult,
    grid: MultiLayerGridMap,
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = config.outputs
    if outputs.trajectories:
        trajectory_frame(t, truth_xyz, est_xyz).to_csv(out_dir / "trajectory.csv", index=False)
        errors_frame(t, result.error).to_csv(out_dir / "errors.csv", index=False)
    if outputs.maps:
        export_layers(grid, out_dir)
    if outputs.images:
        masks = mispredict_mask(grid, config.world)
        export_mask(masks[MapLayer.RESISTANCE], out_dir / "mispredict_r.pgm")
        export_mask(masks[MapLayer.GRADE], out_dir / "mispredict_s.pgm")


def _group_task(blob: bytes, group_id: int, out_dir: Optional[str], output_rate_hz: Optional[float]) -> GroupResult:
    rec = decode_recording(blob)
    config = scenario_from_yaml(rec.scenario_yaml)
    return run_group(rec, config, config.group(group_id), Path(out_dir) if out_dir else None, output_rate_hz)


def _seed_task(scenario_yaml: str, seed: int) -> bytes:
    config = scenario_from_yaml(scenario_yaml)
    return encode_recording(simulate_seed(config, seed, scenario_yaml))


def make_run_dir(root: Union[str, Path], scenario_yaml: str) -> Path:
    """run-<UTC timestamp>-<config hash>, never reusing an existing directory."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = f"run-{stamp}-{config_hash(scenario_yaml)}"
    candidate, suffix = root / base, 1
    while True:
        try:
            candidate.mkdir()
            return candidate
        except FileExistsError:
            candidate = root / f"{base}-{suffix}"
            suffix += 1


def _execute(pool: Optional[ProcessPoolExecutor], fn, *args):
    if pool is None:
        return _Immediate(fn, *args)
    return pool.submit(fn, *args)


class _Immediate:
    """Future-like wrapper used when work runs inline."""

    def __init__(self, fn, *args):
        try:
            self._value, self._error = fn(*args), None
        except Exception as e:
            self._value, self._error = None, e

    def result(self):
        if self._error is not None:
            raise self._error
        return self._value


def run_scenario(
    config_path: Union[str, Path],
    out_dir: Optional[Union[str, Path]] = None,
    seeds: Optional[Sequence[int]] = None,
    groups: Optional[Sequence[int]] = None,
    workers: int = 1,
    quiet: bool = False,
    output_rate_hz: Optional[float] = None,
) -> RunResult:
    """
    Run the whole study described by a scenario file.

    Args:
        config_path: Scenario YAML
        out_dir: Parent of the run directory; the scenario's output directory or ./runs otherwise
        seeds: Replace the scenario's seed list
        groups: Restrict to these group ids
        workers: Process pool size; 1 runs everything in this process
        quiet: Hide the progress bar
        output_rate_hz: Filter output grid rate; the scenario's value otherwise

    Returns:
        The run directory and per-(seed, group) results

    Raises:
        ScenarioValidationError: If the scenario is invalid
        PartialArtifactError: If any work item failed
    """
    config_path = Path(config_path)
    config = load_scenario(config_path)
    scenario_yaml = config_path.read_text(encoding="utf-8")
    seeds = list(seeds) if seeds else list(config.study.seeds)
    negative = [f"seed override: {s} must be >= 0" for s in seeds if s < 0]
    if negative:
        raise ScenarioValidationError(negative, str(config_path))
    selected = [g for g in config.study.groups if groups is None or g.id in set(groups)]

    run_dir = make_run_dir(out_dir or config.outputs.directory or "./runs", scenario_yaml)
    (run_dir / "scenario.yaml").write_text(scenario_yaml, encoding="utf-8")
    progress = ProgressLog(run_dir / "progress.log")
    progress.write(f"start: {len(seeds)} seeds x {len(selected)} groups, workers={workers}")
    logger.info(f"Run directory {run_dir}")

    run = RunResult(run_dir)
    completed: List[str] = []
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        recordings: Dict[int, bytes] = {}
        seed_futures = {_execute(pool, _seed_task, scenario_yaml, seed): seed for seed in seeds}
        for future in _iterate(seed_futures, pool):
            seed = seed_futures[future]
            try:
                recordings[seed] = future.result()
            except Exception as e:
                logger.error(f"seed {seed} simulation failed: {str(e)}")
                progress.write(f"seed {seed}: simulation FAILED: {e}")
                run.failed.extend(f"seed-{seed}/group-{g.id:02d}" for g in selected)
                continue
            seed_dir = run_dir / f"seed-{seed}"
            seed_dir.mkdir(exist_ok=True)
            if config.outputs.recording:
                (seed_dir / RECORDING_NAME).write_bytes(recordings[seed])
            progress.write(f"seed {seed}: recorded")

        group_futures = {}
        for seed in seeds:
            if seed not in recordings:
                continue
            for g in selected:
                target = run_dir / f"seed-{seed}" / group_dir_name(g, config.group_filter(g))
                future = _execute(pool, _group_task, recordings[seed], g.id, str(target), output_rate_hz)
                group_futures[future] = (seed, g.id)

        bar = tqdm(total=len(group_futures), desc="groups", unit="run", disable=quiet)
        for future in _iterate(group_futures, pool):
            seed, group_id = group_futures[future]
            label = f"seed-{seed}/group-{group_id:02d}"
            try:
                result = future.result()
            except Exception as e:
                logger.error(f"{label} failed: {str(e)}")
                progress.write(f"{label}: FAILED: {e}")
                run.failed.append(label)
            else:
                run.results.append(result)
                completed.append(label)
                progress.write(f"{label}: net_rmse={result.error.net_rmse:.4f} J_r={result.map_report.J_r:.4f} "
                               f"J_s={result.map_report.J_s:.4f}")
            bar.update(1)
        bar.close()
    finally:
        if pool is not None:
            pool.shutdown()

    run.results.sort(key=lambda r: (r.seed, r.group))
    summarize_study(run.results).to_csv(run_dir / "summary.csv", index=False)
    progress.write(f"done: {len(completed)} completed, {len(run.failed)} failed")

    if run.failed:
        raise PartialArtifactError(f"{len(run.failed)} work items failed in {run_dir}", sorted(completed), run.failed)
    return run


def _iterate(futures: dict, pool: Optional[ProcessPoolExecutor]):
    if pool is None:
        return list(futures)
    return as_completed(futures)


def replay(
    recording_path: Union[str, Path],
    group_id: int,
    filter_kind: Optional[str] = None,
    out_dir: Optional[Union[str, Path]] = None,
    output_rate_hz: Optional[float] = None,
) -> GroupResult:
    """
    Re-run filtering for one group from a stored recording.

    Args:
        recording_path: Recording written by run_scenario
        group_id: Group to replay
        filter_kind: "ekf" or "ukf" to override the group's filter
        out_dir: Directory for the group's artifacts
        output_rate_hz: Filter output grid rate

    Raises:
        RecordingFormatError: If the recording is corrupt
        IncompatibleRecordingError: If it has another format version
    """
    rec = read_recording(recording_path)
    config = scenario_from_yaml(rec.scenario_yaml, str(recording_path))
    try:
        group = config.group(group_id)
    except KeyError:
        raise ScenarioValidationError([f"study.groups: no group with id {group_id}"], str(recording_path)) from None
    if filter_kind is not None:
        group = group.model_copy(update={"filter": filter_kind})
    logger.info(f"Replaying group {group_id} ({config.group_filter(group)}) from {recording_path}")
    return run_group(rec, config, group, Path(out_dir) if out_dir else None, output_rate_hz)


def map_diff(
    map_path: Union[str, Path],
    config_path: Union[str, Path],
    out_dir: Optional[Union[str, Path]] = None,
) -> Tuple[MapErrorReport, MultiLayerGridMap]:
    """
    Score a stored map against a scenario's ground truth.

    Writes mispredict masks (and the ground-truth raster) into ``out_dir``
    when given.
    """
    grid = load_map(map_path)
    config = load_scenario(config_path)
    report = map_error_rate(grid, config.world)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        masks = mispredict_mask(grid, config.world)
        for code, mask in masks.items():
            suffix = "r" if code == MapLayer.RESISTANCE else "s"
            export_mask(mask, out_dir / f"mispredict_{suffix}.pgm")
        export_layers(rasterize_truth(config.world, grid), out_dir / "truth")
    return report, grid
