"""
Multi-layer terrain grid map and the plotter that fills it.

Storage is a (layers, m, n, 3) float array; each cell record is
(x_loc, y_loc, value) or all NaN while the cell is unknown.
"""
import math
import struct
from enum import IntEnum
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

from config.logging_config import get_logger
from services.exceptions import InvalidArgumentError, MapFormatError, OutOfMapError
from services.world import Extent, GroundTruthMap

logger = get_logger(__name__)

MAP_MAGIC = b"TFGM"
MAP_VERSION = 1
# magic, version, layer count, m, n, resolution, origin x, origin y, skipped
_HEADER = struct.Struct("<4sHHIIdddQ")


class MapLayer(IntEnum):
    RESISTANCE = 0
    GRADE = 1
    HEADING = 2  # reserved, never written


class CellIndex(NamedTuple):
    i: int
    j: int


class MultiLayerGridMap:
    """
    Congruent layers over an m x n grid of square cells.

    Cell (0, 0) has its lower-left corner at ``origin``; cell (i, j) covers
    [origin_x + i*res, origin_x + (i+1)*res) x [origin_y + j*res, ...).
    """

    def __init__(
        self,
        m: int,
        n: int,
        resolution: float = 1.0,
        origin: Tuple[float, float] = (0.0, 0.0),
        layers: Sequence[MapLayer] = (MapLayer.RESISTANCE, MapLayer.GRADE),
        data: Optional[np.ndarray] = None,
        skipped: int = 0,
    ):
        if m < 1 or n < 1:
            raise InvalidArgumentError(f"grid needs at least one cell per axis, got {m}x{n}")
        if not resolution > 0.0:
            raise InvalidArgumentError(f"resolution must be positive, got {resolution}")
        self.m = int(m)
        self.n = int(n)
        self.resolution = float(resolution)
        self.origin = (float(origin[0]), float(origin[1]))
        self.layers = tuple(MapLayer(code) for code in layers)
        if len(set(self.layers)) != len(self.layers):
            raise InvalidArgumentError("layer codes must be unique")
        shape = (len(self.layers), self.m, self.n, 3)
        if data is None:
            data = np.full(shape, np.nan)
        elif data.shape != shape:
            raise InvalidArgumentError(f"data shape {data.shape} does not match {shape}")
        self.data = data
        self.skipped = int(skipped)

    @classmethod
    def from_extent(cls, extent: Extent, resolution: float = 1.0, **kwargs) -> "MultiLayerGridMap":
        """Smallest grid anchored at the extent's lower-left corner that covers it."""
        m = max(1, int(math.ceil(extent.width / resolution - 1e-9)))
        n = max(1, int(math.ceil(extent.height / resolution - 1e-9)))
        return cls(m, n, resolution, (extent.x_min, extent.y_min), **kwargs)

    def layer(self, code: MapLayer) -> np.ndarray:
        try:
            return self.data[self.layers.index(MapLayer(code))]
        except ValueError:
            raise InvalidArgumentError(f"map has no {MapLayer(code).name.lower()} layer") from None

    def values(self, code: MapLayer) -> np.ndarray:
        """(m, n) array of layer values, NaN where unknown."""
        return self.layer(code)[..., 2]

    def populated(self, code: MapLayer) -> np.ndarray:
        return ~np.isnan(self.values(code))

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """(m, n) arrays of cell-centre x and y."""
        xs = self.origin[0] + (np.arange(self.m) + 0.5) * self.resolution
        ys = self.origin[1] + (np.arange(self.n) + 0.5) * self.resolution
        return np.meshgrid(xs, ys, indexing="ij")

    def single_layer(self, code: MapLayer) -> "MultiLayerGridMap":
        return MultiLayerGridMap(self.m, self.n, self.resolution, self.origin, (code,),
                                 self.layer(code)[None].copy(), self.skipped)

    def copy(self) -> "MultiLayerGridMap":
        return MultiLayerGridMap(self.m, self.n, self.resolution, self.origin, self.layers,
                                 self.data.copy(), self.skipped)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultiLayerGridMap):
            return NotImplemented
        return serialize_map(self) == serialize_map(other)

    def __repr__(self) -> str:
        names = ",".join(code.name.lower() for code in self.layers)
        return f"MultiLayerGridMap({self.m}x{self.n} @ {self.resolution} m, layers={names}, skipped={self.skipped})"


def cell_index(grid: MultiLayerGridMap, x: float, y: float) -> CellIndex:
    """
    Cell containing (x, y); cells are half-open so each point has exactly one.

    Raises:
        OutOfMapError: If the point lies outside the grid
    """
    fi = math.floor((x - grid.origin[0]) / grid.resolution) if math.isfinite(x) else -1
    fj = math.floor((y - grid.origin[1]) / grid.resolution) if math.isfinite(y) else -1
    if not (0 <= fi < grid.m and 0 <= fj < grid.n):
        raise OutOfMapError(f"({x}, {y}) is outside the {grid.m}x{grid.n} map")
    return CellIndex(int(fi), int(fj))


def record_cell(
    grid: MultiLayerGridMap,
    pose_estimate: Tuple[float, float],
    resistance: float,
    grade: float,
) -> MultiLayerGridMap:
    """
    Write (x, y, value) into every layer's cell under the estimate.

    Last write wins. Poses outside the map are skipped and counted.
    """
    x, y = float(pose_estimate[0]), float(pose_estimate[1])
    try:
        i, j = cell_index(grid, x, y)
    except OutOfMapError:
        grid.skipped += 1
        logger.debug(f"plotter skip: ({x:.2f}, {y:.2f}) outside map")
        return grid
    for k, code in enumerate(grid.layers):
        if code == MapLayer.RESISTANCE:
            grid.data[k, i, j] = (x, y, resistance)
        elif code == MapLayer.GRADE:
            grid.data[k, i, j] = (x, y, grade)
    return grid


def run_plotter(
    truth_xy: np.ndarray,
    estimate_xy: np.ndarray,
    ground: GroundTruthMap,
    grid: MultiLayerGridMap,
) -> MultiLayerGridMap:
    """
    Fill the map along a trajectory.

    Terrain is sampled under the true position and written into the cell
    under the estimated position, step by step.

    Args:
        truth_xy: (N, 2) true positions on the output grid
        estimate_xy: (N, 2) estimated positions at the same times
        ground: Ground-truth terrain
        grid: Map to populate in place

    Returns:
        The populated map
    """
    truth_xy = np.asarray(truth_xy, dtype=float).reshape(-1, 2)
    estimate_xy = np.asarray(estimate_xy, dtype=float).reshape(-1, 2)
    if len(truth_xy) != len(estimate_xy):
        raise InvalidArgumentError(
            f"trajectories are not aligned: {len(truth_xy)} truth vs {len(estimate_xy)} estimates"
        )
    if len(truth_xy) == 0:
        return grid

    resistance, slope = ground.sample_grid(truth_xy[:, 0], truth_xy[:, 1])
    before = grid.skipped
    for k in range(len(estimate_xy)):
        record_cell(grid, estimate_xy[k], float(resistance[k]), float(slope[k]))
    if grid.skipped > before:
        logger.info(f"plotter skipped {grid.skipped - before} of {len(estimate_xy)} poses outside the map")
    return grid


def rasterize_truth(ground: GroundTruthMap, grid: MultiLayerGridMap) -> MultiLayerGridMap:
    """Map of the same geometry with every cell set from the ground truth at its centre."""
    out = MultiLayerGridMap(grid.m, grid.n, grid.resolution, grid.origin, grid.layers)
    cx, cy = grid.cell_centers()
    resistance, slope = ground.sample_grid(cx, cy)
    for k, code in enumerate(out.layers):
        if code == MapLayer.HEADING:
            continue
        out.data[k, ..., 0] = cx
        out.data[k, ..., 1] = cy
        out.data[k, ..., 2] = resistance if code == MapLayer.RESISTANCE else slope
    return out


def serialize_map(grid: MultiLayerGridMap) -> bytes:
    """Little-endian header, layer code table, then row-major f64 cell records."""
    header = _HEADER.pack(
        MAP_MAGIC, MAP_VERSION, len(grid.layers), grid.m, grid.n,
        grid.resolution, grid.origin[0], grid.origin[1], grid.skipped,
    )
    codes = struct.pack(f"<{len(grid.layers)}H", *grid.layers)
    return header + codes + np.ascontiguousarray(grid.data, dtype="<f8").tobytes()


def deserialize_map(blob: bytes) -> MultiLayerGridMap:
    """
    Parse a serialized map.

    Raises:
        MapFormatError: On a bad magic, version, layer table or length, with
            the byte offset where parsing stopped
    """
    if len(blob) < _HEADER.size:
        raise MapFormatError(f"stream too short for header ({len(blob)} bytes)", len(blob))
    magic, version, count, m, n, resolution, ox, oy, skipped = _HEADER.unpack_from(blob, 0)
    if magic != MAP_MAGIC:
        raise MapFormatError(f"bad magic {magic!r}", 0)
    if version != MAP_VERSION:
        raise MapFormatError(f"unsupported map version {version}", 4)
    if count < 1 or m < 1 or n < 1 or not (resolution > 0.0):
        raise MapFormatError("invalid map geometry in header", 6)

    offset = _HEADER.size
    table = struct.Struct(f"<{count}H")
    if len(blob) < offset + table.size:
        raise MapFormatError("truncated layer table", len(blob))
    codes = table.unpack_from(blob, offset)
    try:
        layers = [MapLayer(code) for code in codes]
    except ValueError:
        raise MapFormatError(f"unknown layer code in {codes}", offset) from None
    offset += table.size

    expected = count * m * n * 3 * 8
    if len(blob) - offset != expected:
        raise MapFormatError(
            f"cell payload is {len(blob) - offset} bytes, expected {expected}", min(len(blob), offset + expected)
        )
    data = np.frombuffer(blob, dtype="<f8", offset=offset).reshape(count, m, n, 3).astype(float)
    try:
        return MultiLayerGridMap(m, n, resolution, (ox, oy), layers, data, skipped)
    except InvalidArgumentError as e:
        raise MapFormatError(str(e), _HEADER.size) from e


def save_map(grid: MultiLayerGridMap, path: Union[str, Path]) -> None:
    Path(path).write_bytes(serialize_map(grid))


def load_map(path: Union[str, Path]) -> MultiLayerGridMap:
    return deserialize_map(Path(path).read_bytes())


def export_csv(grid: MultiLayerGridMap, code: MapLayer, path: Union[str, Path]) -> None:
    """n rows (y) by m columns (x) of values; unknown cells written as NaN."""
    frame = pd.DataFrame(grid.values(code).T)
    frame.to_csv(path, header=False, index=False, na_rep="NaN")


def _to_image(pixels: np.ndarray) -> Image.Image:
    # rows run north to south so the image is viewed with +y up
    return Image.fromarray(np.ascontiguousarray(pixels.T[::-1]))


def layer_pixels(values: np.ndarray) -> np.ndarray:
    """Scale known values min..max onto 1..255; unknown cells become 0."""
    pixels = np.zeros(values.shape, dtype=np.uint8)
    known = ~np.isnan(values)
    if np.any(known):
        lo, hi = float(values[known].min()), float(values[known].max())
        if hi > lo:
            pixels[known] = np.round(1.0 + 254.0 * (values[known] - lo) / (hi - lo)).astype(np.uint8)
        else:
            pixels[known] = 255
    return pixels


def export_pgm(grid: MultiLayerGridMap, code: MapLayer, path: Union[str, Path]) -> None:
    _to_image(layer_pixels(grid.values(code))).save(path, format="PPM")


def export_mask(mask: np.ndarray, path: Union[str, Path]) -> None:
    """Boolean (m, n) mask as PGM, 255 where true."""
    _to_image(np.where(mask, 255, 0).astype(np.uint8)).save(path, format="PPM")


def export_layers(grid: MultiLayerGridMap, directory: Union[str, Path], codes: Iterable[MapLayer] = None) -> None:
    """Write <layer>.bin, <layer>.csv and <layer>.pgm for each layer."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for code in codes or grid.layers:
        if code == MapLayer.HEADING:
            continue
        name = code.name.lower()
        save_map(grid.single_layer(code), directory / f"{name}.bin")
        export_csv(grid, code, directory / f"{name}.csv")
        export_pgm(grid, code, directory / f"{name}.pgm")
