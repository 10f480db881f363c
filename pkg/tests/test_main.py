"""
Tests for the command line interface.
"""
import os
from pathlib import Path
from unittest.mock import patch

import pytest
from click.testing import CliRunner

# Set test environment variables before importing
os.environ.update({
    "TERRAFUSION_LOG_LEVEL": "WARNING",
    "TERRAFUSION_WORKERS": "1",
})

from config.settings import DEFAULT_SCENARIO  # noqa: E402
from main import EXIT_RUNTIME, EXIT_VALIDATION, cli  # noqa: E402
from services.exceptions import PartialArtifactError  # noqa: E402
from services.gridmap import MultiLayerGridMap, record_cell, save_map  # noqa: E402
from services.world import Extent  # noqa: E402


@pytest.fixture(autouse=True)
def quiet_logging():
    """Keep the CLI from reconfiguring logging for the rest of the session."""
    with patch("main.setup_logging") as mock:
        yield mock


@pytest.fixture
def runner():
    return CliRunner()


class TestValidate:
    """Test the validate command."""

    def test_default_scenario(self, runner):
        result = runner.invoke(cli, ["validate", str(DEFAULT_SCENARIO)])
        assert result.exit_code == 0
        assert "ok (7 devices, 16 groups, 10 seeds)" in result.output

    def test_invalid_scenario(self, runner, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text(Path(DEFAULT_SCENARIO).read_text().replace("dt: 0.01", "dt: 5.0"))
        result = runner.invoke(cli, ["validate", str(path)])
        assert result.exit_code == EXIT_VALIDATION
        assert "simulation.dt" in result.output

    def test_missing_file(self, runner, tmp_path):
        result = runner.invoke(cli, ["validate", str(tmp_path / "nope.yaml")])
        assert result.exit_code == EXIT_VALIDATION

    def test_log_level_passed_to_logging(self, runner, quiet_logging):
        runner.invoke(cli, ["--quiet", "--log-level", "debug", "validate", str(DEFAULT_SCENARIO)])
        args, kwargs = quiet_logging.call_args
        assert args[0] == "DEBUG"
        assert kwargs["quiet"] is True


class TestRun:
    """Test the run command."""

    def test_partial_failure_exit_code(self, runner, small_scenario_path):
        error = PartialArtifactError("1 work items failed", ["seed-42/group-02"], ["seed-42/group-13"])
        with patch("services.study.run_scenario", side_effect=error) as mock_run:
            result = runner.invoke(cli, ["run", str(small_scenario_path), "--seed-override", "42"])
        assert result.exit_code == EXIT_RUNTIME
        assert "failed: seed-42/group-13" in result.output
        assert mock_run.call_args.kwargs["seeds"] == (42,)

    def test_invalid_config_exit_code(self, runner, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("name: [")
        result = runner.invoke(cli, ["run", str(path), "--out-dir", str(tmp_path)])
        assert result.exit_code == EXIT_VALIDATION

    def test_negative_seed_override(self, runner, small_scenario_path):
        with patch("services.study.run_scenario") as mock_run:
            result = runner.invoke(cli, ["run", str(small_scenario_path), "--seed-override", "-3"])
        assert result.exit_code == EXIT_VALIDATION
        mock_run.assert_not_called()

    @pytest.mark.slow
    def test_run_and_replay(self, runner, small_scenario_path, tmp_path):
        result = runner.invoke(
            cli, ["--quiet", "run", str(small_scenario_path), "--group", "10", "--out-dir", str(tmp_path / "runs")]
        )
        assert result.exit_code == 0, result.output
        run_dir = Path(result.output.strip().splitlines()[-1])
        assert (run_dir / "summary.csv").exists()

        recording = run_dir / "seed-42" / "recording.tfsr"
        result = runner.invoke(cli, ["replay", str(recording), "--group", "10", "--filter", "ekf"])
        assert result.exit_code == 0, result.output
        assert "group 10 (ekf) net RMSE" in result.output
        assert (run_dir / "seed-42" / "replay-group-10-ekf" / "trajectory.csv").exists()


class TestReplay:
    """Test replay error handling."""

    def test_corrupt_recording(self, runner, tmp_path):
        path = tmp_path / "broken.tfsr"
        path.write_bytes(b"TFSR\x01\x00")
        result = runner.invoke(cli, ["replay", str(path), "--group", "1"])
        assert result.exit_code == EXIT_RUNTIME
        assert "byte offset" in result.output

    def test_group_is_required(self, runner, tmp_path):
        path = tmp_path / "broken.tfsr"
        path.write_bytes(b"")
        result = runner.invoke(cli, ["replay", str(path)])
        assert result.exit_code != 0


class TestMapDiff:
    """Test the map-diff command."""

    @pytest.fixture
    def site_grid(self):
        return MultiLayerGridMap.from_extent(Extent(x_min=-20.0, y_min=-20.0, x_max=180.0, y_max=180.0))

    def test_scores_map(self, runner, tmp_path, site_grid):
        record_cell(site_grid, (0.5, 0.5), 0.008, 0.0)
        record_cell(site_grid, (120.5, 60.5), 0.008, 0.0)
        path = tmp_path / "map.bin"
        save_map(site_grid, path)
        result = runner.invoke(cli, ["map-diff", str(path), str(DEFAULT_SCENARIO), "--out-dir", str(tmp_path / "diff")])
        assert result.exit_code == 0, result.output
        assert "T=2 E_r=1 E_s=1" in result.output
        assert (tmp_path / "diff" / "mispredict_s.pgm").exists()

    def test_empty_map(self, runner, tmp_path, site_grid):
        path = tmp_path / "map.bin"
        save_map(site_grid, path)
        result = runner.invoke(cli, ["map-diff", str(path), str(DEFAULT_SCENARIO)])
        assert result.exit_code == 0
        assert "map has no populated cells" in result.output

    def test_malformed_map(self, runner, tmp_path):
        path = tmp_path / "map.bin"
        path.write_bytes(b"TFGM" + bytes(10))
        result = runner.invoke(cli, ["map-diff", str(path), str(DEFAULT_SCENARIO)])
        assert result.exit_code == EXIT_RUNTIME
