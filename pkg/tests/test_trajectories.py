import math

import numpy as np
import pytest

from skidnmpc.errors import InvalidArgumentError
from skidnmpc.se2 import wrap_angle
from skidnmpc.trajectories import (
    TrajectoryKind,
    TrajectorySpec,
    check_speed_band,
    horizon_references,
    sample_many,
    sample_reference,
    speed_range,
)

CIRCLE = TrajectorySpec(TrajectoryKind.CIRCLE, period=251.327412, diameter=12.0)
LEMNISCATE = TrajectorySpec(TrajectoryKind.LEMNISCATE, period=420.0, width=19.0, height=10.0)


def test_spec_validation():
    with pytest.raises(InvalidArgumentError):
        TrajectorySpec(TrajectoryKind.CIRCLE, period=0.0)
    with pytest.raises(InvalidArgumentError):
        TrajectorySpec(TrajectoryKind.CIRCLE, period=10.0, diameter=-1.0)
    with pytest.raises(InvalidArgumentError):
        TrajectorySpec(TrajectoryKind.LEMNISCATE, period=10.0, width=0.0)
    with pytest.raises(InvalidArgumentError):
        TrajectorySpec(TrajectoryKind.MULTI_LEMNISCATE, period=10.0, laps=0)


def test_circle_start_point():
    pose, rate = sample_reference(CIRCLE, 0.0)
    np.testing.assert_allclose(pose.as_vector(), [6.0, 0.0, math.pi / 2], atol=1e-12)
    assert np.hypot(rate[0], rate[1]) == pytest.approx(2 * math.pi * 6.0 / CIRCLE.period)
    assert np.hypot(rate[0], rate[1]) == pytest.approx(0.15, abs=1e-6)


def test_circle_quarter_period():
    pose, _ = sample_reference(CIRCLE, CIRCLE.period / 4.0)
    assert pose.x == pytest.approx(0.0, abs=1e-9)
    assert pose.y == pytest.approx(6.0, abs=1e-9)
    assert wrap_angle(pose.alpha) == pytest.approx(math.pi, abs=1e-9)


def test_circle_heading_rate_constant():
    times = np.linspace(0.0, 2 * CIRCLE.period, 500)
    _, rates = sample_many(CIRCLE, times)
    np.testing.assert_allclose(rates[:, 2], 2 * math.pi / CIRCLE.period, atol=1e-12)


def test_lemniscate_center_crossing():
    pose, rate = sample_reference(LEMNISCATE, 0.0)
    assert pose.x == pytest.approx(0.0, abs=1e-12)
    assert pose.y == pytest.approx(0.0, abs=1e-12)
    assert np.all(np.isfinite(rate))
    assert np.hypot(rate[0], rate[1]) > 0.0


def test_lemniscate_bounding_box():
    times = np.linspace(0.0, LEMNISCATE.period, 20000)
    poses, _ = sample_many(LEMNISCATE, times)
    assert poses[:, 0].max() == pytest.approx(9.5, abs=1e-3)
    assert poses[:, 0].min() == pytest.approx(-9.5, abs=1e-3)
    assert poses[:, 1].max() == pytest.approx(5.0, abs=1e-3)
    assert poses[:, 1].min() == pytest.approx(-5.0, abs=1e-3)


@pytest.mark.parametrize("spec", [CIRCLE, LEMNISCATE])
def test_rate_matches_finite_differences(spec):
    # independent oracle: central differences of the sampled pose
    rng = np.random.default_rng(31)
    times = rng.uniform(1.0, 3 * spec.period, size=1000)
    h = 1e-4
    poses_p, _ = sample_many(spec, times + h)
    poses_m, _ = sample_many(spec, times - h)
    _, rates = sample_many(spec, times)
    fd_xy = (poses_p[:, :2] - poses_m[:, :2]) / (2 * h)
    d_alpha = np.array(
        [wrap_angle(a) for a in (poses_p[:, 2] - poses_m[:, 2])]
    ) / (2 * h)
    scale = np.maximum(1.0, np.abs(rates[:, :2]))
    assert np.max(np.abs(fd_xy - rates[:, :2]) / scale) < 1e-6
    assert np.max(np.abs(d_alpha - rates[:, 2]) / np.maximum(1.0, np.abs(rates[:, 2]))) < 1e-6


def test_horizon_references_shapes_and_first_sample():
    poses, rates = horizon_references(CIRCLE, t0=12.3, n=1, dt=0.1)
    assert poses.shape == (2, 3) and rates.shape == (2, 3)
    ref_pose, ref_rate = sample_reference(CIRCLE, 12.3)
    np.testing.assert_allclose(poses[0], ref_pose.as_vector(), atol=1e-12)
    np.testing.assert_allclose(rates[0], ref_rate, atol=1e-12)


def test_horizon_headings_monotone_on_circle():
    poses, _ = horizon_references(CIRCLE, t0=200.0, n=30, dt=0.1)
    assert np.all(np.diff(poses[:, 2]) > 0)


def test_horizon_headings_continuous_on_lemniscate():
    # sweep start times across the lap, headings must never jump
    for t0 in np.linspace(0.0, LEMNISCATE.period, 97):
        poses, _ = horizon_references(LEMNISCATE, t0=float(t0), n=30, dt=0.5)
        assert np.max(np.abs(np.diff(poses[:, 2]))) < 1.0


def test_horizon_anchor_keeps_branch():
    poses_a, _ = horizon_references(LEMNISCATE, t0=100.0, n=5, dt=0.1)
    anchor = poses_a[0, 2] + 2 * math.pi  # pretend loop tracked one turn up
    poses_b, _ = horizon_references(LEMNISCATE, t0=100.0, n=5, dt=0.1, anchor_alpha=anchor)
    np.testing.assert_allclose(poses_b[:, 2], poses_a[:, 2] + 2 * math.pi, atol=1e-12)


def test_multi_lemniscate_periodicity():
    spec = TrajectorySpec(TrajectoryKind.MULTI_LEMNISCATE, period=420.0, laps=2)
    p0, _ = sample_reference(spec, 10.0)
    p1, _ = sample_reference(spec, 10.0 + spec.period)
    assert abs(p0.x - p1.x) < 1e-9
    assert abs(p0.y - p1.y) < 1e-9
    assert spec.duration() == pytest.approx(840.0)


def test_sample_reference_rejects_bad_time():
    with pytest.raises(InvalidArgumentError):
        sample_reference(CIRCLE, -1.0)
    with pytest.raises(InvalidArgumentError):
        sample_reference(CIRCLE, math.nan)


def test_shipped_specs_feasible_speed_band():
    # wheel bounds 0.1..0.8 rad/s at r=0.3 allow speeds in 0.03..0.24 m/s
    check_speed_band(CIRCLE, wheel_radius=0.3, rate_min=0.1, rate_max=0.8)
    check_speed_band(LEMNISCATE, wheel_radius=0.3, rate_min=0.1, rate_max=0.8)
    lo, hi = speed_range(LEMNISCATE)
    assert 0.03 <= lo <= hi <= 0.24


def test_speed_band_violation_raises():
    fast = TrajectorySpec(TrajectoryKind.CIRCLE, period=50.0, diameter=12.0)
    with pytest.raises(InvalidArgumentError):
        check_speed_band(fast, wheel_radius=0.3, rate_min=0.1, rate_max=0.8)
