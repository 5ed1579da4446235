import math

import numpy as np
import pytest

from skidnmpc.errors import ContractViolationError, InvalidArgumentError
from skidnmpc.model import Integrator, PlatformParams, WheelRates
from skidnmpc.se2 import Pose
from skidnmpc.trajectories import TrajectoryKind, TrajectorySpec, horizon_references
from skidnmpc.transcription import (
    Bounds,
    DecisionVector,
    HorizonConfig,
    Weights,
    acceleration_rows,
    build_nlp,
    gradient_check,
    shooting_defect,
)

PARAMS = PlatformParams(r=0.3, c=1.0)
CIRCLE = TrajectorySpec(TrajectoryKind.CIRCLE, period=251.327412, diameter=12.0)


def make_problem(n=5, dt=0.1, integrator=Integrator.EULER, deadzone=False,
                 weights=None, bounds=None, meas_pose=None, meas_rates=None, t0=5.0):
    config = HorizonConfig(n=n, dt=dt, integrator=integrator, deadzone_in_model=deadzone)
    weights = weights or Weights()
    bounds = bounds or Bounds()
    refs = horizon_references(CIRCLE, t0, n, dt)
    meas_pose = meas_pose or Pose(6.0, 0.1, math.pi / 2)
    meas_rates = meas_rates or WheelRates(0.5, 0.45)
    problem = build_nlp(config, weights, bounds, PARAMS, refs, meas_pose, meas_rates)
    return config, problem, refs


def random_z(config, rng, spread=0.5):
    z = rng.uniform(-spread, spread, size=config.n_vars)
    # keep headings and rates in a realistic band
    for k in range(config.n + 1):
        z[5 * k : 5 * k + 2] += 6.0
        z[5 * k + 2] = rng.uniform(-2.0, 2.0)
    for k in range(config.n):
        z[5 * k + 3 : 5 * k + 5] = rng.uniform(0.1, 0.8, size=2)
    return z


# -- sizes and layout --------------------------------------------------------


def test_decision_vector_layout_and_indexers():
    config = HorizonConfig(n=4, dt=0.1)
    assert config.n_vars == 23
    z = DecisionVector(np.arange(23.0), 4)
    np.testing.assert_allclose(z.state(0), [0, 1, 2])
    np.testing.assert_allclose(z.control(0), [3, 4])
    np.testing.assert_allclose(z.state(4), [20, 21, 22])
    with pytest.raises(IndexError):
        z.state(5)
    with pytest.raises(IndexError):
        z.control(4)
    with pytest.raises(InvalidArgumentError):
        DecisionVector(np.zeros(10), 4)


def test_problem_dimensions():
    n = 7
    config, problem, _ = make_problem(n=n)
    assert problem.n == 5 * n + 3
    assert problem.m_eq == 3 * n + 5
    assert problem.m_ineq == 2 * (n - 1)


# -- defects ------------------------------------------------------------------


def test_defects_vanish_on_exact_rollout():
    config, problem, _ = make_problem(n=6)
    rng = np.random.default_rng(41)
    controls = rng.uniform(0.1, 0.8, size=(6, 2))
    dv = DecisionVector.from_rollout(config, PARAMS, Pose(6.0, 0.1, math.pi / 2), controls)
    c = problem.eq_residual(dv.z)
    assert np.max(np.abs(c[5:])) < 1e-12


def test_shooting_defect_examples():
    config = HorizonConfig(n=1, dt=0.1, deadzone_in_model=False)
    zero = Pose(0, 0, 0)
    stepped = Pose(0.03, 0.0, 0.0)
    np.testing.assert_allclose(
        shooting_defect(config, PARAMS, zero, WheelRates(1, 1), stepped), [0, 0, 0], atol=1e-15
    )
    np.testing.assert_allclose(
        shooting_defect(config, PARAMS, zero, WheelRates(1, 1), zero), [-0.03, 0, 0], atol=1e-15
    )
    eps = 1e-4
    base = shooting_defect(config, PARAMS, zero, WheelRates(1, 1), stepped)
    shifted = shooting_defect(config, PARAMS, zero, WheelRates(1, 1), Pose(0.03 + eps, 0, 0))
    np.testing.assert_allclose(shifted - base, [eps, 0, 0], atol=1e-15)


def test_defect_translation_equivariance():
    # moving both endpoint positions by the same offset leaves the defect
    # unchanged: the kinematics depends on the heading only
    config = HorizonConfig(n=1, dt=0.1)
    rng = np.random.default_rng(42)
    for _ in range(50):
        x = Pose(*rng.uniform(-3, 3, 2), rng.uniform(-3, 3))
        x1 = Pose(*rng.uniform(-3, 3, 2), rng.uniform(-3, 3))
        u = WheelRates(*rng.uniform(0.1, 0.8, 2))
        off = rng.uniform(-5, 5, 2)
        d0 = shooting_defect(config, PARAMS, x, u, x1)
        d1 = shooting_defect(
            config, PARAMS,
            Pose(x.x + off[0], x.y + off[1], x.alpha), u,
            Pose(x1.x + off[0], x1.y + off[1], x1.alpha),
        )
        np.testing.assert_allclose(d1[2], d0[2], atol=1e-12)
        np.testing.assert_allclose(d1[:2], d0[:2], atol=1e-12)


def test_pinning_rows_force_measurements():
    config, problem, _ = make_problem(n=3)
    rng = np.random.default_rng(43)
    z = random_z(config, rng)
    c = problem.eq_residual(z)
    np.testing.assert_allclose(c[0:3], z[0:3] - np.array([6.0, 0.1, math.pi / 2]), atol=1e-12)
    np.testing.assert_allclose(c[3:5], z[3:5] - np.array([0.5, 0.45]), atol=1e-12)


# -- objective ----------------------------------------------------------------


def test_zero_weights_zero_cost():
    zero_w = Weights(q_x=(0, 0, 0), q_xdot=(0, 0, 0), r=(0, 0),
                     q_x_terminal=(0, 0, 0), q_xdot_terminal=(0, 0, 0))
    config, problem, _ = make_problem(n=1, weights=zero_w)
    rng = np.random.default_rng(44)
    for _ in range(10):
        assert problem.objective(random_z(config, rng)) == 0.0
    grad = problem.cost_gradient(random_z(config, rng))
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)


def test_perfect_tracking_zero_cost_with_zero_effort_weight():
    # references are dynamically consistent, so wheel rates realizing the
    # reference rates exist; with R=0 the cost vanishes on them
    n, dt = 8, 0.1
    config = HorizonConfig(n=n, dt=dt, deadzone_in_model=False)
    weights = Weights(r=(0.0, 0.0))
    refs = horizon_references(CIRCLE, 30.0, n, dt)
    poses, rates = refs
    r, c = PARAMS.r, PARAMS.c
    z = np.empty(config.n_vars)
    for k in range(n + 1):
        z[5 * k : 5 * k + 3] = poses[k]
        if k < n:
            v = math.hypot(rates[k, 0], rates[k, 1])
            w = rates[k, 2]
            z[5 * k + 3] = (v + c * w) / r
            z[5 * k + 4] = (v - c * w) / r
    problem = build_nlp(config, weights, Bounds(), PARAMS, refs,
                        Pose.from_vector(poses[0]), WheelRates(z[3], z[4]))
    assert problem.objective(z) < 1e-18


def test_objective_nonnegative():
    config, problem, _ = make_problem(n=5)
    rng = np.random.default_rng(45)
    for _ in range(50):
        assert problem.objective(random_z(config, rng)) >= 0.0


# -- slew rows ----------------------------------------------------------------


def test_acceleration_rows_values():
    config = HorizonConfig(n=3, dt=0.1)
    z = np.zeros(config.n_vars)
    z[3:5] = [0.1, 0.1]
    z[8:10] = [0.12, 0.1]
    z[13:15] = [0.14, 0.1]
    rows = acceleration_rows(config, z)
    np.testing.assert_allclose(rows, [[0.2, 0.0], [0.2, 0.0]], atol=1e-12)


def test_acceleration_rows_constant_controls_zero():
    config = HorizonConfig(n=4, dt=0.05)
    z = np.zeros(config.n_vars)
    for k in range(4):
        z[5 * k + 3 : 5 * k + 5] = [0.3, 0.4]
    np.testing.assert_allclose(acceleration_rows(config, z), 0.0, atol=1e-15)


def test_acceleration_rows_ramp():
    config = HorizonConfig(n=5, dt=0.1)
    z = np.zeros(config.n_vars)
    for k in range(5):
        z[5 * k + 3 : 5 * k + 5] = 0.2 + 0.01 * k
    np.testing.assert_allclose(acceleration_rows(config, z), 0.1, atol=1e-12)


def test_acceleration_rows_need_two_steps():
    with pytest.raises(ContractViolationError):
        acceleration_rows(HorizonConfig(n=1, dt=0.1), np.zeros(8))


def test_problem_ineq_matches_acceleration_rows():
    config, problem, _ = make_problem(n=4)
    rng = np.random.default_rng(46)
    z = random_z(config, rng)
    rows = acceleration_rows(config, z)
    np.testing.assert_allclose((problem.ineq_matrix @ z).reshape(-1, 2), rows, atol=1e-12)


def test_first_slew_row_admits_out_of_band_measurement():
    # wheels at rest while the rate box starts at 0.1: the first slew row
    # must still allow stepping into the box
    config, problem, _ = make_problem(n=5, meas_rates=WheelRates(0.0, 0.0))
    assert problem.ineq_hi[0] >= (0.1 - 0.0) / 0.1 - 1e-12
    assert problem.lb[3] <= 0.0 <= problem.ub[3]


# -- derivatives --------------------------------------------------------------


@pytest.mark.parametrize("integrator", [Integrator.EULER, Integrator.RK4])
@pytest.mark.parametrize("deadzone", [False, True])
def test_gradient_check_random_instances(integrator, deadzone):
    rng = np.random.default_rng(47)
    config, problem, _ = make_problem(n=5, integrator=integrator, deadzone=deadzone)
    for _ in range(5):
        z = random_z(config, rng)
        assert gradient_check(problem, z) < 1e-5


def test_gradient_check_zero_weight_gradient():
    zero_w = Weights(q_x=(0, 0, 0), q_xdot=(0, 0, 0), r=(0, 0),
                     q_x_terminal=(0, 0, 0), q_xdot_terminal=(0, 0, 0))
    config, problem, _ = make_problem(n=3, weights=zero_w)
    rng = np.random.default_rng(48)
    z = random_z(config, rng)
    np.testing.assert_allclose(problem.cost_gradient(z), 0.0, atol=1e-15)
    assert gradient_check(problem, z) < 1e-5


def test_refs_shape_mismatch_rejected():
    config = HorizonConfig(n=5, dt=0.1)
    refs = horizon_references(CIRCLE, 0.0, 4, 0.1)  # one node short
    with pytest.raises(ContractViolationError):
        build_nlp(config, Weights(), Bounds(), PARAMS, refs, Pose(0, 0, 0), WheelRates(0.2, 0.2))


def test_bounds_validation():
    with pytest.raises(InvalidArgumentError):
        Bounds(rate_min=(0.9, 0.9), rate_max=(0.8, 0.8))
    with pytest.raises(InvalidArgumentError):
        Weights(q_x=(-1.0, 0.0, 0.0))
