"""
Tests for trajectory and map error metrics and the study summary.
"""
import numpy as np
import pytest

from services.exceptions import EvaluationError
from services.gridmap import MapLayer, MultiLayerGridMap, record_cell
from services.metrics import (
    SUMMARY_COLUMNS,
    GroupResult,
    MapErrorReport,
    align_truth,
    errors_frame,
    map_error_rate,
    mispredict_mask,
    net_rmse,
    summarize_study,
    trajectory_error,
    trajectory_frame,
)
from services.world import Extent, GroundTruthMap


def _track(t, x, y):
    return np.column_stack([t, x, y])


class TestTrajectoryError:
    """Test localization error summaries."""

    def test_net_rmse(self):
        assert net_rmse(1.093, 1.330) == pytest.approx(1.7217, abs=5e-4)

    def test_constant_offset(self):
        t = np.arange(10) * 0.1
        truth = _track(t, t, -t)
        err = trajectory_error(_track(t, t + 3.0, -t + 4.0), truth)
        assert err.rmse_x == pytest.approx(3.0)
        assert err.rmse_y == pytest.approx(4.0)
        assert err.net_rmse == pytest.approx(5.0)
        assert err.max_error == pytest.approx(5.0)
        assert np.allclose(err.euclidean, 5.0)

    def test_perfect_estimate(self):
        t = np.arange(5.0)
        truth = _track(t, t**2, t)
        err = trajectory_error(truth.copy(), truth)
        assert err.net_rmse == 0.0 and err.max_error == 0.0

    def test_length_mismatch(self):
        with pytest.raises(EvaluationError):
            trajectory_error(np.zeros((3, 3)), np.zeros((4, 3)))

    def test_empty(self):
        with pytest.raises(EvaluationError):
            trajectory_error(np.zeros((0, 3)), np.zeros((0, 3)))

    def test_timestamp_mismatch(self):
        a = _track([0.0, 1.0], [0.0, 0.0], [0.0, 0.0])
        b = _track([0.0, 1.5], [0.0, 0.0], [0.0, 0.0])
        with pytest.raises(EvaluationError):
            trajectory_error(a, b)

    def test_align_truth_interpolates(self):
        truth_t = np.array([0.0, 1.0, 2.0])
        truth_xyz = np.array([[0.0, 0.0, 0.0], [2.0, 4.0, 0.0], [4.0, 8.0, 1.0]])
        aligned = align_truth(truth_t, truth_xyz, np.array([0.5, 1.5, 2.0]))
        assert aligned.tolist() == [[1.0, 2.0, 0.0], [3.0, 6.0, 0.5], [4.0, 8.0, 1.0]]

    def test_running_rmse_converges_to_total(self):
        t = np.arange(6.0)
        truth = _track(t, np.zeros(6), np.zeros(6))
        est = _track(t, [1.0, -1.0, 2.0, 0.0, 0.5, 1.0], [0.0, 1.0, 0.0, -2.0, 0.0, 1.0])
        err = trajectory_error(est, truth)
        frame = errors_frame(t, err)
        assert frame["running_rmse_x"].iloc[-1] == pytest.approx(err.rmse_x)
        assert frame["running_net_rmse"].iloc[-1] == pytest.approx(err.net_rmse)
        assert frame["running_rmse_x"].iloc[0] == pytest.approx(1.0)

    def test_trajectory_frame_columns(self):
        t = np.arange(3.0)
        frame = trajectory_frame(t, np.zeros((3, 3)), np.ones((3, 3)))
        assert list(frame.columns) == ["t", "truth_x", "truth_y", "truth_z", "est_x", "est_y", "est_z", "eucl_err"]
        assert frame["eucl_err"].tolist() == pytest.approx([2**0.5] * 3)


class TestMapError:
    """Test mispredict counting."""

    @pytest.fixture
    def flat(self):
        return GroundTruthMap(extent=Extent(x_min=0, y_min=0, x_max=3, y_max=3), default_resistance=0.03)

    def test_one_wrong_in_five(self, flat):
        g = MultiLayerGridMap(3, 3)
        for x, y in [(0.5, 0.5), (1.5, 0.5), (2.5, 2.5), (0.5, 2.5)]:
            record_cell(g, (x, y), 0.03, 0.0)
        record_cell(g, (1.5, 1.5), 0.25, 0.0)
        report = map_error_rate(g, flat)
        assert (report.E_r, report.T_r) == (1, 5)
        assert report.J_r == pytest.approx(0.2)
        assert report.J_s == 0.0
        assert mispredict_mask(g, flat)[MapLayer.RESISTANCE][1, 1]

    def test_unknown_cells_are_ignored(self, flat):
        report = map_error_rate(MultiLayerGridMap(3, 3), flat)
        assert report == MapErrorReport(0, 0, 0, 0)
        assert report.J_r == 0.0 and report.empty

    def test_missing_grade_layer_reports_zero(self, flat):
        g = MultiLayerGridMap(3, 3, layers=(MapLayer.RESISTANCE,))
        record_cell(g, (0.5, 0.5), 0.03, 0.0)
        report = map_error_rate(g, flat)
        assert (report.T_r, report.T_s, report.T) == (1, 0, 1)

    @staticmethod
    def _noisy_records(rng, count=300):
        cells = rng.choice(100 * 100, size=count, replace=False)
        xy = np.column_stack([cells // 100 + 0.5, cells % 100 + 0.5])
        resistance = rng.choice([0.020, 0.030, 0.250], size=count)
        grade = rng.choice([0.0, 15.0], size=count)
        return xy, resistance, grade

    def test_forgetting_cells_never_adds_errors(self, square_world, rng):
        xy, resistance, grade = self._noisy_records(rng)
        g = MultiLayerGridMap(100, 100)
        for k in range(len(xy)):
            record_cell(g, xy[k], resistance[k], grade[k])
        before = map_error_rate(g, square_world)
        for k in rng.choice(len(xy), size=100, replace=False):
            i, j = int(xy[k, 0]), int(xy[k, 1])
            g.data[:, i, j] = np.nan
            after = map_error_rate(g, square_world)
            assert after.E_r <= before.E_r and after.E_s <= before.E_s
            before = after
        assert before.T_r == len(xy) - 100

    def test_record_order_does_not_matter_for_distinct_cells(self, square_world, rng):
        xy, resistance, grade = self._noisy_records(rng)
        forward, shuffled = MultiLayerGridMap(100, 100), MultiLayerGridMap(100, 100)
        for k in range(len(xy)):
            record_cell(forward, xy[k], resistance[k], grade[k])
        for k in rng.permutation(len(xy)):
            record_cell(shuffled, xy[k], resistance[k], grade[k])
        assert map_error_rate(forward, square_world) == map_error_rate(shuffled, square_world)
        assert forward == shuffled


class TestSummarizeStudy:
    """Test aggregation over seeds."""

    @staticmethod
    def _result(group, seed, offset, filter_kind="ekf"):
        t = np.arange(4.0)
        truth = _track(t, np.zeros(4), np.zeros(4))
        err = trajectory_error(_track(t, np.full(4, offset), np.zeros(4)), truth)
        return GroupResult(group, filter_kind, 1, 1, True, seed, err, MapErrorReport(1, 0, 10, 10))

    def test_mean_and_population_std(self):
        frame = summarize_study([self._result(2, 42, 1.0), self._result(2, 7, 3.0), self._result(1, 42, 0.5)])
        assert list(frame.columns) == SUMMARY_COLUMNS
        assert frame["group"].tolist() == [1, 2]
        row = frame.iloc[1]
        assert row["seed_count"] == 2
        assert row["net_rmse_mean"] == pytest.approx(2.0)
        assert row["net_rmse_std"] == pytest.approx(1.0)
        assert row["J_r"] == pytest.approx(0.1)
        assert row["encoder"] == 1

    def test_empty(self):
        frame = summarize_study([])
        assert frame.empty and list(frame.columns) == SUMMARY_COLUMNS
