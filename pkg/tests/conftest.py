"""
Shared fixtures for the TerraFusion test suite.
"""
import os
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

# Add the project root to the Python path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config.settings import DEFAULT_SCENARIO  # noqa: E402
from services.world import Extent, GroundTruthMap, TerrainZone  # noqa: E402


def _rect(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


@pytest.fixture
def square_world():
    """100 m x 100 m site with sand, concrete and one 15 degree ramp."""
    return GroundTruthMap(
        extent=Extent(x_min=0.0, y_min=0.0, x_max=100.0, y_max=100.0),
        resistance_zones=[
            TerrainZone(name="sand", boundary=_rect(10, 10, 30, 30), resistance_coeff=0.250),
            TerrainZone(name="concrete", boundary=_rect(40, 0, 60, 20), resistance_coeff=0.008),
        ],
        slope_zones=[TerrainZone(name="ramp", boundary=_rect(70, 70, 90, 90), slope_deg=15.0)],
        default_resistance=0.03,
        default_slope=0.0,
    )


@pytest.fixture
def two_zone_world():
    """Two resistance zones sharing the edge x = 50."""
    return GroundTruthMap(
        extent=Extent(x_min=0.0, y_min=0.0, x_max=100.0, y_max=20.0),
        resistance_zones=[
            TerrainZone(name="gravel", boundary=_rect(0, 0, 50, 20), resistance_coeff=0.020),
            TerrainZone(name="sand", boundary=_rect(50, 0, 100, 20), resistance_coeff=0.250),
        ],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_yaml_text():
    return Path(DEFAULT_SCENARIO).read_text(encoding="utf-8")


def small_scenario_dict():
    """A short straight drive with every device kind and three groups."""
    doc = yaml.safe_load(Path(DEFAULT_SCENARIO).read_text(encoding="utf-8"))
    doc["name"] = "small"
    doc["script"]["waypoints"] = [[0, 0], [30, 0]]
    for device in doc["sensors"]:
        if device["type"] in ("imu", "encoder"):
            device["model"] = dict(device["model"], rate_hz=20.0)
    doc["study"] = {
        "seeds": [42],
        "groups": [
            {"id": 2, "filter": "ekf", "gps": ["gps1"], "imu": ["imu1"], "encoder": ["encoder"]},
            {"id": 10, "filter": "ukf", "gps": ["gps1"], "imu": ["imu1"], "encoder": ["encoder"]},
            {"id": 13, "filter": "ukf", "gps": ["gps1", "gps2"], "imu": ["imu1"], "encoder": ["encoder"]},
        ],
    }
    return doc


@pytest.fixture
def small_scenario_path(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(yaml.safe_dump(small_scenario_dict(), sort_keys=False), encoding="utf-8")
    return path
