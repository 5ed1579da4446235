"""Skid-steer kinematics and integrators.

Wheel rates map to a body twist through the first-order kinematic model

    vx = (r/2) * (rate_right + rate_left)
    vy = 0
    omega = (r/2c) * (rate_right - rate_left)

with r the effective rolling radius and 2c the lateral wheel spacing.  The
continuous-time state equation composes this with the heading rotation, and
an optional smooth dead-zone gate attenuates rates below a threshold so the
prediction model can reflect actuators that do not respond to small inputs
while staying C1 for derivative-based solvers.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import InvalidArgumentError, NumericFailureError
from .se2 import Frame, Pose, Twist, adjoint_transform


@dataclass(frozen=True)
class PlatformParams:
    """Geometry and dead-zone shape of the platform.

    The longitudinal half-spacing `a` is carried for documentation; the
    planar kinematics only uses `r` and `c`.
    """

    r: float = 0.3
    c: float = 1.0
    a: float = 0.85
    deadzone_delta: float = 0.05
    deadzone_kappa: float = 100.0

    def __post_init__(self):
        if not (self.r > 0.0):
            raise InvalidArgumentError(f"wheel radius must be positive, got {self.r}")
        if not (self.c > 0.0):
            raise InvalidArgumentError(f"lateral half-spacing must be positive, got {self.c}")
        if not (self.deadzone_kappa > 0.0):
            raise InvalidArgumentError(f"dead-zone sharpness must be positive, got {self.deadzone_kappa}")
        if self.deadzone_delta < 0.0:
            raise InvalidArgumentError(f"dead-zone threshold must be >= 0, got {self.deadzone_delta}")


@dataclass(frozen=True)
class WheelRates:
    """Angular velocities of the right and left wheel pairs [rad/s]."""

    right: float
    left: float

    def __post_init__(self):
        if not (math.isfinite(self.right) and math.isfinite(self.left)):
            raise InvalidArgumentError(f"wheel rates must be finite, got {self.right!r}, {self.left!r}")

    def as_array(self) -> np.ndarray:
        return np.array([self.right, self.left])


class Integrator(enum.Enum):
    EULER = "euler"
    RK4 = "rk4"


def smooth_gate(u, delta: float, kappa: float):
    """Logistic dead-zone gate s(u) = u * sigmoid(kappa * (|u| - delta)).

    Works elementwise on arrays.  Returns (value, derivative); both are C1,
    the value is odd, monotone, and satisfies |s(u)| <= |u|.
    """
    u = np.asarray(u, dtype=float)
    z = kappa * (np.abs(u) - delta)
    # sigmoid evaluated stably on both tails via exp(-|z|)
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    value = u * sig
    deriv = sig * (1.0 + kappa * np.abs(u) * (1.0 - sig))
    return value, deriv


def smooth_deadzone(rates: WheelRates, delta: float, kappa: float) -> WheelRates:
    """Apply the smooth dead-zone gate to both wheel rates."""
    if not (kappa > 0.0):
        raise InvalidArgumentError(f"dead-zone sharpness must be positive, got {kappa}")
    value, _ = smooth_gate(rates.as_array(), delta, kappa)
    return WheelRates(float(value[0]), float(value[1]))


def body_twist(params: PlatformParams, rates: WheelRates) -> Twist:
    """Body twist produced by the given wheel rates (no gating)."""
    vx = 0.5 * params.r * (rates.right + rates.left)
    omega = 0.5 * params.r / params.c * (rates.right - rates.left)
    return Twist(vx, 0.0, omega, frame=Frame.BODY)


def state_derivative(
    params: PlatformParams,
    pose: Pose,
    rates: WheelRates,
    deadzone_enabled: bool = False,
) -> np.ndarray:
    """Pose-vector rate [xdot, ydot, alphadot] of the continuous model."""
    if deadzone_enabled:
        rates = smooth_deadzone(rates, params.deadzone_delta, params.deadzone_kappa)
    world = adjoint_transform(pose, body_twist(params, rates))
    return world.as_vector()


def integrate_step(
    method: Integrator,
    pose: Pose,
    xdot_fn: Callable[[np.ndarray], np.ndarray],
    dt: float,
) -> Pose:
    """One explicit integration step of the pose under xdot_fn.

    xdot_fn maps a pose vector to its rate; no state is kept between calls.
    Raises NumericFailureError (carrying the offending pose vector) if the
    derivative evaluates to non-finite values.
    """
    if not (dt > 0.0):
        raise InvalidArgumentError(f"time step must be positive, got {dt}")
    x = pose.as_vector()
    if method is Integrator.EULER:
        k1 = np.asarray(xdot_fn(x), dtype=float)
        _check_finite(k1, x)
        return Pose.from_vector(x + dt * k1)
    if method is Integrator.RK4:
        k1 = np.asarray(xdot_fn(x), dtype=float)
        _check_finite(k1, x)
        k2 = np.asarray(xdot_fn(x + 0.5 * dt * k1), dtype=float)
        _check_finite(k2, x)
        k3 = np.asarray(xdot_fn(x + 0.5 * dt * k2), dtype=float)
        _check_finite(k3, x)
        k4 = np.asarray(xdot_fn(x + dt * k3), dtype=float)
        _check_finite(k4, x)
        return Pose.from_vector(x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))
    raise InvalidArgumentError(f"unknown integrator {method!r}")


def _check_finite(k: np.ndarray, state: np.ndarray) -> None:
    if not np.all(np.isfinite(k)):
        raise NumericFailureError(f"state derivative is non-finite: {k}", state=state)
