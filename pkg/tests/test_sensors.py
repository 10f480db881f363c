"""
Tests for the synthetic devices and stream merging.
"""
import math

import numpy as np
import pytest
from scipy import stats

from services.geo import NavSatTransform, Pose3
from services.sensors import (
    DropoutSchedule,
    EncoderDevice,
    EncoderModel,
    GpsDevice,
    GpsModel,
    ImuBias,
    ImuDevice,
    ImuModel,
    OutlierModel,
    SensorKind,
    SensorReading,
    device_rng,
    gps_available,
    measure_encoder,
    measure_gps,
    measure_imu,
    merge_streams,
    record_all,
    sample_times,
)
from services.world import Trajectory, VehicleState

QUIET_IMU = ImuModel(
    sigma_orientation=0.0, sigma_gyro=0.0, sigma_accel=0.0,
    gyro_bias_walk=0.0, accel_bias_walk=0.0, yaw_bias_walk=0.0,
)


def _truth(x=10.0, y=-4.0, z=1.0, yaw=0.7, speed=2.0, yaw_rate=0.1):
    return VehicleState(
        pose=Pose3(x, y, z, 0.01, -0.02, yaw),
        v=np.array([speed, 0.0, 0.0]),
        w=np.array([0.0, 0.0, yaw_rate]),
        a=np.array([0.3, 0.0, 0.0]),
    )


def _reading(device_id, t, kind=SensorKind.ENCODER_VELOCITY):
    dim = kind.dim
    return SensorReading(device_id, t, kind, np.zeros(dim), np.eye(dim))


class TestGpsAvailable:
    """Test the periodic dropout schedule."""

    def test_defaults(self):
        d = DropoutSchedule()
        assert gps_available(d, 9.5) is False
        assert gps_available(d, 5.0) is True
        assert gps_available(d, 9.0) is False
        assert gps_available(d, 10.0) is True

    def test_phase_shifts_window(self):
        d = DropoutSchedule(phase=3.3)
        assert gps_available(d, 9.5) is True
        assert gps_available(d, 12.8) is False

    def test_outage_must_be_shorter_than_period(self):
        with pytest.raises(ValueError):
            DropoutSchedule(period=1.0, outage=1.0)


class TestMeasureGps:
    """Test GPS readings."""

    def test_noise_free_equals_truth(self, rng):
        model = GpsModel(sigma_xy=1e-12, sigma_z=1e-12)
        truth = _truth()
        r = measure_gps(model, truth, 5.0, rng)
        assert r.kind is SensorKind.GPS_POSITION
        assert np.allclose(r.value, truth.pose.position, atol=1e-9)
        assert np.allclose(np.diag(r.noise_cov), [1e-24, 1e-24, 1e-24])

    def test_absent_during_outage(self, rng):
        assert measure_gps(GpsModel(), _truth(), 9.5, rng) is None

    def test_mount_offset_rotates_with_vehicle(self, rng):
        model = GpsModel(sigma_xy=1e-12, sigma_z=1e-12, mount_offset=(0.0, 1.0, 0.0))
        truth = VehicleState(pose=Pose3(3.0, 4.0, 0.0, yaw=math.pi / 2))
        r = measure_gps(model, truth, 1.0, rng)
        assert np.allclose(r.value, (2.0, 4.0, 0.0), atol=1e-9)

    def test_outlier_displacement(self, rng):
        model = GpsModel(sigma_xy=1e-12, sigma_z=1e-12, outliers=OutlierModel(probability=1.0, magnitude=30.0))
        truth = _truth()
        r = measure_gps(model, truth, 1.0, rng)
        offset = r.value - truth.pose.position
        assert math.hypot(offset[0], offset[1]) == pytest.approx(30.0, abs=1e-6)

    def test_navsat_round_trip_is_transparent(self, rng):
        nav = NavSatTransform(51.0, 7.0, 120.0)
        model = GpsModel(sigma_xy=1e-12, sigma_z=1e-12)
        truth = _truth(x=150.0, y=90.0)
        r = measure_gps(model, truth, 1.0, rng, navsat=nav)
        assert np.allclose(r.value, truth.pose.position, atol=1e-3)

    def test_sample_statistics(self):
        rng = np.random.default_rng(3)
        truth = _truth()
        values = np.array([measure_gps(GpsModel(), truth, 1.0, rng).value for _ in range(5000)])
        std = (values - truth.pose.position).std(axis=0)
        assert std == pytest.approx([2.0, 2.0, 3.0], rel=0.05)


    def test_standardized_residuals_are_standard_normal(self):
        rng = np.random.default_rng(21)
        model = GpsModel(sigma_xy=1.5, sigma_z=2.5)
        truth = _truth()
        readings = [measure_gps(model, truth, 1.0, rng) for _ in range(10_000)]
        residuals = np.array([(r.value - truth.pose.position) / np.sqrt(np.diag(r.noise_cov))
                              for r in readings])
        for axis in range(3):
            assert stats.kstest(residuals[:, axis], "norm").pvalue > 0.01


class TestMeasureImu:
    """Test IMU bundles."""

    def test_noise_free_equals_truth(self, rng):
        truth = _truth()
        r = measure_imu(QUIET_IMU, truth, 0.5, rng, ImuBias())
        expected = np.concatenate([[0.01, -0.02, 0.7], truth.w, truth.a])
        assert r.kind is SensorKind.IMU_BUNDLE
        assert np.allclose(r.value, expected, atol=1e-12)

    def test_yaw_stays_wrapped(self, rng):
        model = ImuModel(sigma_orientation=0.01)
        truth = _truth(yaw=math.pi - 1e-4)
        for _ in range(500):
            yaw = measure_imu(model, truth, 0.0, rng).value[2]
            assert -math.pi < yaw <= math.pi

    def test_lever_arm_adds_centripetal(self, rng):
        model = QUIET_IMU.model_copy(update={"mount_offset": (2.0, 0.0, 0.0)})
        truth = _truth(yaw_rate=0.5)
        r = measure_imu(model, truth, 0.0, rng)
        assert r.value[6] == pytest.approx(0.3 - 0.5 * 0.5 * 2.0)

    def test_bias_random_walk_variance_grows_linearly(self):
        model = ImuModel(gyro_bias_walk=0.01, accel_bias_walk=0.0)
        dt, runs = 0.1, 200
        at_50, at_100 = [], []
        for i in range(runs):
            rng = np.random.default_rng(1000 + i)
            bias = ImuBias()
            for k in range(1, 1001):
                bias.step(model, dt, rng)
                if k == 500:
                    at_50.append(bias.gyro.copy())
            at_100.append(bias.gyro.copy())
        var_50 = np.var(np.concatenate(at_50))
        var_100 = np.var(np.concatenate(at_100))
        assert var_50 == pytest.approx(0.01**2 * 50.0, rel=0.2)
        assert var_100 == pytest.approx(0.01**2 * 100.0, rel=0.2)
        assert var_100 > var_50


    def test_covariance_includes_accumulated_bias_walk(self, rng):
        model = ImuModel(
            sigma_orientation=0.01, sigma_gyro=0.005, sigma_accel=0.05,
            gyro_bias_walk=1e-3, accel_bias_walk=1e-2, yaw_bias_walk=2e-3, rate_hz=50.0,
        )
        bias = ImuBias()
        early = measure_imu(model, _truth(), 0.0, rng, bias)
        late = measure_imu(model, _truth(), 400.0, rng, bias)
        drift = 400.0 + 1.0 / 50.0
        expected = [
            0.01**2, 0.01**2, 0.01**2 + 2e-3**2 * drift,
            *[0.005**2 + 1e-3**2 * drift] * 3,
            *[0.05**2 + 1e-2**2 * drift] * 3,
        ]
        assert np.allclose(np.diag(late.noise_cov), expected, rtol=1e-12)
        assert np.all(np.diag(late.noise_cov)[2:] > np.diag(early.noise_cov)[2:])
        assert np.diag(late.noise_cov)[0] == np.diag(early.noise_cov)[0]

    def test_covariance_without_bias_is_white_noise_only(self, rng):
        model = ImuModel(gyro_bias_walk=1e-3, accel_bias_walk=1e-2, yaw_bias_walk=2e-3)
        r = measure_imu(model, _truth(), 300.0, rng)
        expected = np.repeat([model.sigma_orientation**2, model.sigma_gyro**2, model.sigma_accel**2], 3)
        assert np.allclose(np.diag(r.noise_cov), expected, rtol=1e-12)


class TestMeasureEncoder:
    """Test wheel-encoder speed."""

    def test_noise_free(self, rng):
        model = EncoderModel(sigma_speed_rel=0.0, sigma_speed_abs=0.0)
        r = measure_encoder(model, _truth(speed=2.0), 0.0, rng)
        assert r.value[0] == 2.0

    def test_multiplicative_noise_is_zero_at_rest(self, rng):
        model = EncoderModel(sigma_speed_rel=0.1, sigma_speed_abs=0.0)
        assert measure_encoder(model, _truth(speed=0.0), 0.0, rng).value[0] == 0.0

    def test_sample_std(self):
        rng = np.random.default_rng(9)
        model = EncoderModel(sigma_speed_rel=0.05, sigma_speed_abs=0.0)
        truth = _truth(speed=2.0)
        values = [measure_encoder(model, truth, 0.0, rng).value[0] for _ in range(10_000)]
        assert np.std(values) == pytest.approx(0.1, rel=0.05)


    def test_variance_uses_measured_speed(self):
        rng = np.random.default_rng(5)
        model = EncoderModel(sigma_speed_rel=0.05, sigma_speed_abs=0.02)
        for _ in range(50):
            r = measure_encoder(model, _truth(speed=3.0), 0.0, rng)
            assert r.noise_cov[0, 0] == pytest.approx((0.05 * r.value[0]) ** 2 + 0.02**2, rel=1e-12)

    def test_standardized_residuals_are_standard_normal(self):
        rng = np.random.default_rng(17)
        model = EncoderModel(sigma_speed_rel=0.03, sigma_speed_abs=0.04)
        speed = 2.5
        truth = _truth(speed=speed)
        values = np.array([measure_encoder(model, truth, 0.0, rng).value[0] for _ in range(10_000)])
        scale = math.sqrt((0.03 * speed) ** 2 + 0.04**2)
        assert stats.kstest((values - speed) / scale, "norm").pvalue > 0.01


class TestMergeStreams:
    """Test time ordering and tie-breaking."""

    def test_empty_stream(self):
        a = [_reading("encoder", 0.0), _reading("encoder", 1.0)]
        merged = merge_streams([a, []])
        assert merged == a

    def test_gps_tie_broken_by_id(self):
        g2 = _reading("gps2", 1.0, SensorKind.GPS_POSITION)
        g1 = _reading("gps1", 1.0, SensorKind.GPS_POSITION)
        assert [r.device_id for r in merge_streams([[g2], [g1]])] == ["gps1", "gps2"]

    def test_kind_priority_on_ties(self):
        enc = _reading("a_encoder", 2.0)
        imu = _reading("imu", 2.0, SensorKind.IMU_BUNDLE)
        gps = _reading("z_gps", 2.0, SensorKind.GPS_POSITION)
        assert [r.kind for r in merge_streams([[enc], [imu], [gps]])] == [
            SensorKind.GPS_POSITION, SensorKind.IMU_BUNDLE, SensorKind.ENCODER_VELOCITY,
        ]

    def test_random_streams_are_permuted_and_sorted(self, rng):
        streams = []
        for i in range(4):
            times = np.sort(rng.choice(np.arange(0.0, 10.0, 0.5), size=8))
            streams.append([_reading(f"dev{i}", float(t)) for t in times])
        merged = merge_streams(streams)
        oracle = sorted((r for s in streams for r in s), key=lambda r: (r.t, r.device_id))
        assert len(merged) == 32
        assert all(a.t <= b.t for a, b in zip(merged, merged[1:]))
        assert [id(r) for r in merged] == [id(r) for r in oracle]


class TestDeviceSimulation:
    """Test device streams over a trajectory."""

    @pytest.fixture
    def straight(self):
        states = [
            VehicleState(pose=Pose3(0.1 * k, 0.0, 0.0), v=np.array([1.0, 0.0, 0.0]), t=k * 0.1)
            for k in range(201)
        ]
        return Trajectory(states=states)

    def test_sample_times(self):
        assert sample_times(1.0, 3.0).tolist() == [0.0, 1.0, 2.0, 3.0]
        assert len(sample_times(50.0, 20.0)) == 1001

    def test_stream_rates_and_dropout(self, straight):
        devices = [GpsDevice(id="gps1"), ImuDevice(id="imu1", model=ImuModel(rate_hz=10.0)),
                   EncoderDevice(id="encoder", model=EncoderModel(rate_hz=5.0))]
        streams = record_all(devices, straight, 42)
        gps_times = [r.t for r in streams["gps1"]]
        assert 9.0 not in gps_times and 19.0 not in gps_times
        assert len(gps_times) == 19
        assert len(streams["imu1"]) == 201
        assert len(streams["encoder"]) == 101

    def test_substreams_are_independent(self, straight):
        gps = GpsDevice(id="gps1")
        alone = record_all([gps], straight, 42)["gps1"]
        together = record_all([GpsDevice(id="gps2"), gps, EncoderDevice(id="encoder")], straight, 42)["gps1"]
        assert all(a.same_as(b) for a, b in zip(alone, together))
        assert len(alone) == len(together)

    def test_device_rng_differs_per_id(self):
        assert device_rng(42, "gps1").random() != device_rng(42, "gps2").random()
        assert device_rng(42, "gps1").random() == device_rng(42, "gps1").random()

    def test_reading_shape_checked(self):
        with pytest.raises(ValueError):
            SensorReading("gps1", 0.0, SensorKind.GPS_POSITION, np.zeros(2), np.eye(2))
