import math

import pytest

from skidnmpc.config import ConfigError, load_config, parse_config
from skidnmpc.model import Integrator
from skidnmpc.solver import SolverMode
from skidnmpc.trajectories import TrajectoryKind

FULL = """
[platform]
r = 0.3
c = 1.0
a = 0.85
deadzone_delta = 0.05
deadzone_kappa = 100.0

[horizon]
n = 30
dt = 0.1
integrator = "euler"
deadzone_in_model = true

[weights]
q_x = [20.0, 20.0, 12.0]
q_xdot = [1.0, 1.0, 1.0]
r = [0.2, 0.2]
q_x_terminal = [20.0, 20.0, 12.0]
q_xdot_terminal = [1.0, 1.0, 1.0]

[bounds]
x_min = [-inf, -inf, -inf]
x_max = [inf, inf, inf]
rate_min = [0.1, 0.1]
rate_max = [0.8, 0.8]
accel_min = [-0.2, -0.2]
accel_max = [0.2, 0.2]

[trajectory]
kind = "circle"
diameter = 12.0
period = 251.32741228718345

[solver]
tolerance = 1e-6
refine_max_iterations = 200
realtime_max_iterations = 1
regularization = 1e-8

[network]
host = "127.0.0.1"
pose_port = 47001
rate_port = 47002
command_port = 47003
loop_period_s = 0.001

[plant]
deadzone_threshold = 0.08
tau = 0.15
saturation = 1.0
pose_noise_std_m = 0.01
pose_noise_std_rad = 0.005
rate_noise_std = 0.005
seed = 2024
"""


def test_full_document_parses():
    controller, plant = parse_config(FULL)
    assert controller.horizon.n == 30
    assert controller.horizon.integrator is Integrator.EULER
    assert controller.weights.q_x == (20.0, 20.0, 12.0)
    assert controller.bounds.rate_max == (0.8, 0.8)
    assert controller.trajectory.kind is TrajectoryKind.CIRCLE
    assert controller.refine.mode is SolverMode.REFINE
    assert controller.realtime.max_iterations == 1
    assert controller.network.pose_port == 47001
    assert plant.tau == 0.15
    # plant starts on the trajectory unless told otherwise
    assert plant.initial_pose[0] == pytest.approx(6.0)
    assert plant.initial_pose[2] == pytest.approx(math.pi / 2)


def test_empty_document_gives_defaults():
    controller, plant = parse_config("")
    assert controller.horizon.n == 30
    assert controller.horizon.dt == 0.1
    assert controller.bounds.rate_min == (0.1, 0.1)
    assert controller.network.loop_period_s == 0.001
    assert plant.deadzone_threshold == 0.08


def test_unknown_section_named():
    with pytest.raises(ConfigError) as err:
        parse_config("[warp]\nspeed = 9\n")
    assert "[warp]" in str(err.value)


def test_unknown_key_named():
    with pytest.raises(ConfigError) as err:
        parse_config("[bounds]\nratemax = [0.8, 0.8]\n")
    assert "[bounds]" in str(err.value) and "ratemax" in str(err.value)


def test_wrong_type_named():
    with pytest.raises(ConfigError) as err:
        parse_config("[horizon]\nn = \"thirty\"\n")
    assert "[horizon]" in str(err.value) and "n" in str(err.value)


def test_invalid_value_reports_section():
    with pytest.raises(ConfigError) as err:
        parse_config("[horizon]\ndt = -0.1\n")
    assert "[horizon]" in str(err.value)


def test_bad_toml_reported():
    with pytest.raises(ConfigError):
        parse_config("[horizon\nn = 3")


def test_unknown_enums():
    with pytest.raises(ConfigError):
        parse_config('[horizon]\nintegrator = "leapfrog"\n')
    with pytest.raises(ConfigError):
        parse_config('[trajectory]\nkind = "spiral"\n')


def test_explicit_initial_pose_kept():
    _, plant = parse_config("[plant]\ninitial_pose = [1.0, 2.0, 0.5]\n")
    assert plant.initial_pose == (1.0, 2.0, 0.5)


def test_load_config_from_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text(FULL, encoding="utf-8")
    controller, _ = load_config(path)
    assert controller.horizon.n == 30


def test_lemniscate_config():
    controller, plant = parse_config(
        '[trajectory]\nkind = "lemniscate"\nwidth = 19.0\nheight = 10.0\nperiod = 420.0\n'
    )
    assert controller.trajectory.kind is TrajectoryKind.LEMNISCATE
    assert controller.trajectory.duration() == pytest.approx(420.0)
    assert plant.initial_pose[0] == pytest.approx(0.0)
