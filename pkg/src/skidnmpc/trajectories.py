"""Reference trajectories on SE(2).

Each trajectory is a smooth timed curve: sampling returns the pose on the
curve with heading tangent to the path, plus the analytic pose rate.  The
shipped shapes are a circle traversed at constant speed and a Gerono-style
lemniscate

    p(t) = (A sin(w t), B sin(w t) cos(w t))

scaled so its bounding box matches the requested width x height.  The
lemniscate is sampled uniformly in the parameter; its speed never reaches
zero, so the tangent heading is defined everywhere including the center
crossing.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .se2 import Pose

_TWO_PI = 2.0 * math.pi


class TrajectoryKind(enum.Enum):
    CIRCLE = "circle"
    LEMNISCATE = "lemniscate"
    MULTI_LEMNISCATE = "multi_lemniscate"


@dataclass(frozen=True)
class TrajectorySpec:
    kind: TrajectoryKind
    period: float
    diameter: float = 12.0        # circle only [m]
    width: float = 19.0           # lemniscate bounding box [m]
    height: float = 10.0
    laps: int = 1                 # multi-lemniscate repetitions
    start_time: float = 0.0

    def __post_init__(self):
        if not (self.period > 0.0):
            raise InvalidArgumentError(f"period must be positive, got {self.period}")
        if self.kind is TrajectoryKind.CIRCLE and not (self.diameter > 0.0):
            raise InvalidArgumentError(f"diameter must be positive, got {self.diameter}")
        if self.kind is not TrajectoryKind.CIRCLE:
            if not (self.width > 0.0 and self.height > 0.0):
                raise InvalidArgumentError(
                    f"lemniscate extents must be positive, got {self.width} x {self.height}"
                )
        if self.laps < 1:
            raise InvalidArgumentError(f"laps must be >= 1, got {self.laps}")

    def duration(self) -> float:
        """Mission length: one period, or laps periods for the repeated shape."""
        if self.kind is TrajectoryKind.MULTI_LEMNISCATE:
            return self.laps * self.period
        return self.period


def sample_many(spec: TrajectorySpec, times) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized sampling: poses (M, 3) and pose rates (M, 3).

    Headings are the per-sample atan2 tangent for lemniscates (wrapped) and
    the naturally unwrapped phase + pi/2 for circles.
    """
    t = np.asarray(times, dtype=float) - spec.start_time
    w = _TWO_PI / spec.period
    phi = w * t
    if spec.kind is TrajectoryKind.CIRCLE:
        radius = 0.5 * spec.diameter
        sin, cos = np.sin(phi), np.cos(phi)
        poses = np.stack([radius * cos, radius * sin, phi + 0.5 * math.pi], axis=-1)
        rates = np.stack([-radius * w * sin, radius * w * cos, np.full_like(phi, w)], axis=-1)
        return poses, rates
    # Gerono lemniscate; MULTI_LEMNISCATE shares the curve and is periodic in t.
    a = 0.5 * spec.width
    b = spec.height
    sin, cos = np.sin(phi), np.cos(phi)
    sin2, cos2 = np.sin(2.0 * phi), np.cos(2.0 * phi)
    px = a * sin
    py = 0.5 * b * sin2
    vx = a * w * cos
    vy = b * w * cos2
    ax = -a * w * w * sin
    ay = -2.0 * b * w * w * sin2
    speed_sq = vx * vx + vy * vy
    heading = np.arctan2(vy, vx)
    heading_rate = (vx * ay - vy * ax) / speed_sq
    poses = np.stack([px, py, heading], axis=-1)
    rates = np.stack([vx, vy, heading_rate], axis=-1)
    return poses, rates


def sample_reference(spec: TrajectorySpec, t: float) -> tuple[Pose, np.ndarray]:
    """Pose on the curve at time t and its analytic rate."""
    if not math.isfinite(t):
        raise InvalidArgumentError(f"sample time must be finite, got {t!r}")
    if t < 0.0:
        raise InvalidArgumentError(f"sample time must be >= 0, got {t}")
    poses, rates = sample_many(spec, np.array([t]))
    return Pose.from_vector(poses[0]), rates[0]


def horizon_references(
    spec: TrajectorySpec,
    t0: float,
    n: int,
    dt: float,
    anchor_alpha: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """References at t0, t0+dt, ..., t0+N*dt as arrays (N+1, 3).

    Headings are unwrapped so they are continuous along the horizon.  When
    anchor_alpha is given the first heading is moved onto the 2*pi branch
    nearest the anchor, which keeps the branch continuous across successive
    calls of a receding-horizon loop.
    """
    if n < 1:
        raise InvalidArgumentError(f"horizon length must be >= 1, got {n}")
    if not (dt > 0.0):
        raise InvalidArgumentError(f"horizon step must be positive, got {dt}")
    times = t0 + dt * np.arange(n + 1)
    poses, rates = sample_many(spec, times)
    alphas = np.unwrap(poses[:, 2])
    if anchor_alpha is not None:
        alphas = alphas + _TWO_PI * round((anchor_alpha - alphas[0]) / _TWO_PI)
    poses[:, 2] = alphas
    return poses, rates


def speed_range(spec: TrajectorySpec, samples: int = 4096) -> tuple[float, float]:
    """Min and max path speed |v| over one period."""
    times = spec.start_time + spec.period * np.arange(samples) / samples
    _, rates = sample_many(spec, times)
    speed = np.hypot(rates[:, 0], rates[:, 1])
    return float(speed.min()), float(speed.max())


def check_speed_band(
    spec: TrajectorySpec,
    wheel_radius: float,
    rate_min: float,
    rate_max: float,
    samples: int = 4096,
) -> None:
    """Verify the path speed stays inside the wheel-feasible band.

    The platform can only realize speeds in [r * rate_min, r * rate_max];
    raises InvalidArgumentError naming the violation otherwise.
    """
    lo, hi = wheel_radius * rate_min, wheel_radius * rate_max
    v_min, v_max = speed_range(spec, samples)
    if v_min < lo - 1e-12 or v_max > hi + 1e-12:
        raise InvalidArgumentError(
            f"trajectory speed range [{v_min:.4f}, {v_max:.4f}] m/s leaves the "
            f"feasible band [{lo:.4f}, {hi:.4f}] m/s implied by wheel-rate bounds"
        )
