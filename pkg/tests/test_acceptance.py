"""
Study-level checks on the shipped scenario: every group over every seed.
"""
import os
from collections import defaultdict

import numpy as np
import pytest

from config.settings import DEFAULT_SCENARIO
from services.study import run_scenario

pytestmark = [pytest.mark.slow, pytest.mark.integration]

DEAD_RECKONING = (1, 9)
MATCHED_PAIRS = [(2, 10), (3, 11), (4, 12), (5, 13), (6, 14), (7, 15), (8, 16)]
UKF_ONE_GPS, UKF_TWO_GPS, EKF_ONE_GPS = 10, 13, 2


@pytest.fixture(scope="module")
def study(tmp_path_factory):
    out = tmp_path_factory.mktemp("study")
    run = run_scenario(DEFAULT_SCENARIO, out_dir=out, workers=os.cpu_count() or 1, quiet=True)
    assert not run.failed
    by_group = defaultdict(dict)
    for r in run.results:
        by_group[r.group][r.seed] = r
    return by_group


def _mean(study, group, metric=lambda r: r.error.net_rmse):
    return float(np.mean([metric(r) for r in study[group].values()]))


class TestShippedScenario:
    """Reproduction bands for the shipped ten-seed study."""

    def test_every_group_ran_on_every_seed(self, study):
        assert sorted(study) == list(range(1, 17))
        assert len({len(per_seed) for per_seed in study.values()}) == 1
        assert len(study[1]) >= 10

    def test_dead_reckoning_diverges(self, study):
        fused = [_mean(study, g) for g in range(1, 17) if g not in DEAD_RECKONING]
        for g in DEAD_RECKONING:
            assert _mean(study, g) > 10.0
            assert _mean(study, g) > 5.0 * max(fused)

    def test_ukf_no_worse_than_ekf(self, study):
        strictly_better = 0
        for ekf, ukf in MATCHED_PAIRS:
            assert _mean(study, ukf) <= _mean(study, ekf)
            strictly_better += _mean(study, ukf) < _mean(study, ekf)
        assert strictly_better >= 6

    def test_second_gps_helps(self, study):
        one, two = _mean(study, UKF_ONE_GPS), _mean(study, UKF_TWO_GPS)
        assert two <= 0.85 * one
        max_one = _mean(study, UKF_ONE_GPS, lambda r: r.error.max_error)
        max_two = _mean(study, UKF_TWO_GPS, lambda r: r.error.max_error)
        assert max_two <= 0.75 * max_one

    def test_headline_accuracy(self, study):
        assert 1.0 <= _mean(study, UKF_TWO_GPS) <= 2.6

    def test_map_quality(self, study):
        reports = {seed: r.map_report for seed, r in study[UKF_TWO_GPS].items()}
        assert np.mean([m.J_r for m in reports.values()]) <= 0.025
        assert np.mean([m.J_s for m in reports.values()]) <= 0.025
        assert all(m.T_r > 0 and m.T_s > 0 for m in reports.values())
        for seed, r in study[EKF_ONE_GPS].items():
            assert r.map_report.J_r >= reports[seed].J_r
            assert r.map_report.J_s >= reports[seed].J_s
