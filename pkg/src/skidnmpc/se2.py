"""Planar rigid-motion primitives.

Poses live on SE(2) and carry both a homogeneous-matrix and a flat-vector
representation [x, y, alpha].  Twists are planar velocities tagged with the
frame they are expressed in; moving a body twist into the world frame uses
the adjoint mapping, which for a twist taken at the body origin reduces to
rotating the linear part:

    xdot = [R(alpha) @ v_body, omega]

so the world twist equals the pose-vector rate and the usual
translation-rotation coupling term of the full adjoint matrix drops out.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolationError, InvalidArgumentError

_TWO_PI = 2.0 * math.pi


class Frame(enum.Enum):
    BODY = "body"
    WORLD = "world"


def rotation_matrix(alpha: float) -> np.ndarray:
    """2x2 rotation matrix [[cos a, -sin a], [sin a, cos a]]."""
    if not math.isfinite(alpha):
        raise InvalidArgumentError(f"rotation angle must be finite, got {alpha!r}")
    c, s = math.cos(alpha), math.sin(alpha)
    return np.array([[c, -s], [s, c]])


def wrap_angle(alpha: float) -> float:
    """Wrap an angle into (-pi, pi].  wrap_angle(-pi) == pi by convention."""
    if not math.isfinite(alpha):
        raise InvalidArgumentError(f"angle must be finite, got {alpha!r}")
    return math.pi - (math.pi - alpha) % _TWO_PI


@dataclass(frozen=True)
class Pose:
    """SE(2) element: planar position [m] and heading angle [rad].

    The heading is stored unwrapped; trajectories keep it monotone over
    laps and callers wrap only when reporting errors.
    """

    x: float
    y: float
    alpha: float

    @property
    def p(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.alpha)

    def as_vector(self) -> np.ndarray:
        """Flat representation [x, y, alpha]."""
        return np.array([self.x, self.y, self.alpha])

    def as_matrix(self) -> np.ndarray:
        """Homogeneous 3x3 representation [[R, p], [0, 1]]."""
        g = np.eye(3)
        g[:2, :2] = self.rotation
        g[0, 2] = self.x
        g[1, 2] = self.y
        return g

    @staticmethod
    def from_vector(v) -> "Pose":
        x, y, alpha = (float(c) for c in v)
        return Pose(x, y, alpha)

    @staticmethod
    def from_matrix(g) -> "Pose":
        g = np.asarray(g, dtype=float)
        if g.shape != (3, 3):
            raise InvalidArgumentError(f"expected 3x3 matrix, got shape {g.shape}")
        alpha = math.atan2(g[1, 0], g[0, 0])
        return Pose(float(g[0, 2]), float(g[1, 2]), alpha)

    @staticmethod
    def identity() -> "Pose":
        return Pose(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Twist:
    """Planar velocity (vx, vy [m/s], omega [rad/s]) tagged with its frame."""

    vx: float
    vy: float
    omega: float
    frame: Frame = Frame.BODY

    @property
    def linear(self) -> np.ndarray:
        return np.array([self.vx, self.vy])

    def as_vector(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.omega])

    def with_frame(self, frame: Frame) -> "Twist":
        return replace(self, frame=frame)


def adjoint_transform(pose: Pose, body_twist: Twist) -> Twist:
    """Express a body twist in the world frame: the pose-vector rate.

    Linear part is rotated by the pose heading, the angular part is
    unchanged.  Requires body_twist.frame == Frame.BODY.
    """
    if body_twist.frame is not Frame.BODY:
        raise ContractViolationError(
            f"adjoint_transform expects a body-frame twist, got {body_twist.frame}"
        )
    c, s = math.cos(pose.alpha), math.sin(pose.alpha)
    return Twist(
        c * body_twist.vx - s * body_twist.vy,
        s * body_twist.vx + c * body_twist.vy,
        body_twist.omega,
        frame=Frame.WORLD,
    )
