"""
Localization and mapping error metrics.
"""
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from services.exceptions import EvaluationError
from services.gridmap import MapLayer, MultiLayerGridMap
from services.world import GroundTruthMap

VALUE_TOLERANCE = 1e-9

SUMMARY_COLUMNS = [
    "group", "filter", "gps_count", "imu_count", "encoder", "seed_count",
    "rmse_x_mean", "rmse_y_mean", "net_rmse_mean", "net_rmse_std", "max_err_mean", "J_r", "J_s",
]
TRAJECTORY_COLUMNS = ["t", "truth_x", "truth_y", "truth_z", "est_x", "est_y", "est_z", "eucl_err"]


def net_rmse(rmse_x: float, rmse_y: float) -> float:
    return math.hypot(rmse_x, rmse_y)


@dataclass(frozen=True, eq=False)
class TrajectoryError:
    """Per-step planar errors and their summaries."""

    dx: np.ndarray
    dy: np.ndarray
    euclidean: np.ndarray
    rmse_x: float
    rmse_y: float
    net_rmse: float
    max_error: float


@dataclass(frozen=True)
class MapErrorReport:
    """Error counts and rates per layer; unknown cells are in neither E nor T."""

    E_r: int
    E_s: int
    T_r: int
    T_s: int

    @property
    def T(self) -> int:
        return max(self.T_r, self.T_s)

    @property
    def J_r(self) -> float:
        return self.E_r / self.T_r if self.T_r else 0.0

    @property
    def J_s(self) -> float:
        return self.E_s / self.T_s if self.T_s else 0.0

    @property
    def empty(self) -> bool:
        return self.T == 0


def align_truth(truth_t: np.ndarray, truth_xyz: np.ndarray, est_t: np.ndarray) -> np.ndarray:
    """Linearly interpolate truth positions (N, k) onto the estimate timestamps."""
    truth_t = np.asarray(truth_t, dtype=float)
    truth_xyz = np.asarray(truth_xyz, dtype=float)
    est_t = np.asarray(est_t, dtype=float)
    if len(truth_t) == 0:
        raise EvaluationError("truth trajectory is empty")
    return np.column_stack([np.interp(est_t, truth_t, truth_xyz[:, k]) for k in range(truth_xyz.shape[1])])


def trajectory_error(est: np.ndarray, truth: np.ndarray) -> TrajectoryError:
    """
    RMSE per axis, net RMSE and per-step distance.

    Args:
        est: (N, 3) rows of (t, x, y)
        truth: (N, 3) rows of (t, x, y), already aligned to ``est``

    Raises:
        EvaluationError: If the two do not line up one-to-one
    """
    est = np.asarray(est, dtype=float).reshape(-1, 3)
    truth = np.asarray(truth, dtype=float).reshape(-1, 3)
    if len(est) != len(truth):
        raise EvaluationError(f"{len(est)} estimates against {len(truth)} truth samples")
    if len(est) == 0:
        raise EvaluationError("no samples to evaluate")
    if not np.allclose(est[:, 0], truth[:, 0], atol=1e-9, rtol=0.0):
        raise EvaluationError("estimate and truth timestamps differ")

    dx = est[:, 1] - truth[:, 1]
    dy = est[:, 2] - truth[:, 2]
    euclidean = np.hypot(dx, dy)
    rmse_x = float(np.sqrt(np.mean(dx**2)))
    rmse_y = float(np.sqrt(np.mean(dy**2)))
    return TrajectoryError(dx, dy, euclidean, rmse_x, rmse_y, net_rmse(rmse_x, rmse_y), float(euclidean.max()))


def errors_frame(t: np.ndarray, error: TrajectoryError) -> pd.DataFrame:
    """Per-step errors with running RMSE, the raw data behind error-over-time plots."""
    n = np.arange(1, len(error.dx) + 1)
    running_x = np.sqrt(np.cumsum(error.dx**2) / n)
    running_y = np.sqrt(np.cumsum(error.dy**2) / n)
    return pd.DataFrame({
        "t": t,
        "dx": error.dx,
        "dy": error.dy,
        "eucl_err": error.euclidean,
        "running_rmse_x": running_x,
        "running_rmse_y": running_y,
        "running_net_rmse": np.hypot(running_x, running_y),
    })


def trajectory_frame(t: np.ndarray, truth_xyz: np.ndarray, est_xyz: np.ndarray) -> pd.DataFrame:
    truth_xyz = np.asarray(truth_xyz, dtype=float)
    est_xyz = np.asarray(est_xyz, dtype=float)
    return pd.DataFrame({
        "t": t,
        "truth_x": truth_xyz[:, 0],
        "truth_y": truth_xyz[:, 1],
        "truth_z": truth_xyz[:, 2],
        "est_x": est_xyz[:, 0],
        "est_y": est_xyz[:, 1],
        "est_z": est_xyz[:, 2],
        "eucl_err": np.hypot(est_xyz[:, 0] - truth_xyz[:, 0], est_xyz[:, 1] - truth_xyz[:, 1]),
    }, columns=TRAJECTORY_COLUMNS)


def mispredict_mask(estimated: MultiLayerGridMap, truth: GroundTruthMap) -> Dict[MapLayer, np.ndarray]:
    """
    Per layer, true where a populated cell disagrees with the ground truth
    at the cell centre.
    """
    cx, cy = estimated.cell_centers()
    resistance, slope = truth.sample_grid(cx, cy)
    reference = {MapLayer.RESISTANCE: resistance, MapLayer.GRADE: slope}
    masks: Dict[MapLayer, np.ndarray] = {}
    for code in estimated.layers:
        if code not in reference:
            continue
        values = estimated.values(code)
        known = ~np.isnan(values)
        wrong = np.zeros(values.shape, dtype=bool)
        wrong[known] = np.abs(values[known] - reference[code][known]) > VALUE_TOLERANCE
        masks[code] = wrong
    return masks


def map_error_rate(estimated: MultiLayerGridMap, truth: GroundTruthMap) -> MapErrorReport:
    """J = E / T per layer; a layer the map does not carry reports zeros."""
    masks = mispredict_mask(estimated, truth)
    counts = {}
    for code in (MapLayer.RESISTANCE, MapLayer.GRADE):
        if code in masks:
            counts[code] = (int(masks[code].sum()), int(estimated.populated(code).sum()))
        else:
            counts[code] = (0, 0)
    (e_r, t_r), (e_s, t_s) = counts[MapLayer.RESISTANCE], counts[MapLayer.GRADE]
    return MapErrorReport(E_r=e_r, E_s=e_s, T_r=t_r, T_s=t_s)


@dataclass(frozen=True, eq=False)
class GroupResult:
    """Outcome of one (group, seed) work item."""

    group: int
    filter: str
    gps_count: int
    imu_count: int
    encoder: bool
    seed: int
    error: TrajectoryError
    map_report: MapErrorReport


def summarize_study(results: Sequence[GroupResult]) -> pd.DataFrame:
    """One row per (group, filter), aggregated over seeds, ordered by group id."""
    rows: List[dict] = [
        {
            "group": r.group,
            "filter": r.filter,
            "gps_count": r.gps_count,
            "imu_count": r.imu_count,
            "encoder": int(r.encoder),
            "seed": r.seed,
            "rmse_x": r.error.rmse_x,
            "rmse_y": r.error.rmse_y,
            "net_rmse": r.error.net_rmse,
            "max_err": r.error.max_error,
            "J_r": r.map_report.J_r,
            "J_s": r.map_report.J_s,
        }
        for r in results
    ]
    if not rows:
        return pd.DataFrame(columns=SUMMARY_COLUMNS)

    frame = pd.DataFrame(rows)
    keys = ["group", "filter", "gps_count", "imu_count", "encoder"]
    summary = frame.groupby(keys, sort=True).agg(
        seed_count=("seed", "nunique"),
        rmse_x_mean=("rmse_x", "mean"),
        rmse_y_mean=("rmse_y", "mean"),
        net_rmse_mean=("net_rmse", "mean"),
        net_rmse_std=("net_rmse", lambda s: float(np.std(s.to_numpy(), ddof=0))),
        max_err_mean=("max_err", "mean"),
        J_r=("J_r", "mean"),
        J_s=("J_s", "mean"),
    ).reset_index()
    return summary[SUMMARY_COLUMNS]
