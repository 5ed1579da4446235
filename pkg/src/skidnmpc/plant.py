"""Ground-truth plant process.

Stands in for the physical platform plus its low-level wheel controller:
per wheel, the command is saturated, passes a hard dead zone (inputs below
the threshold produce nothing), and the achieved rate follows a first-order
lag toward the effective command.  The pose integrates the true kinematics
with RK4 at a fixed substep.  Measurements are the truth plus seeded
Gaussian noise, emitted at each channel's own period (pose slow, wheel
rates fast), so runs are bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidArgumentError
from .model import PlatformParams
from .trajectories import TrajectorySpec, sample_many

__all__ = [
    "PlantConfig",
    "PlantState",
    "Plant",
    "Measurement",
    "plant_step",
    "emit_measurements",
    "open_loop_sine_test",
]


@dataclass(frozen=True)
class PlantConfig:
    platform: PlatformParams = PlatformParams()
    deadzone_threshold: float = 0.08  # rad/s, hard
    tau: float = 0.15                 # actuator lag time constant [s]; 0 disables the lag
    saturation: float = 1.0           # rad/s command clamp
    pose_noise_std_m: float = 0.01
    pose_noise_std_rad: float = 0.005
    rate_noise_std: float = 0.005
    pose_rate_hz: float = 20.0
    wheel_rate_hz: float = 1000.0
    seed: int = 2024
    substep: float = 0.001            # integration substep [s]
    initial_pose: tuple = (0.0, 0.0, 0.0)
    initial_rates: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not (self.substep > 0.0):
            raise InvalidArgumentError(f"substep must be positive, got {self.substep}")
        fastest = max(self.pose_rate_hz, self.wheel_rate_hz)
        if not (fastest > 0.0):
            raise InvalidArgumentError("sensor rates must be positive")
        if self.substep > 1.0 / fastest + 1e-12:
            raise InvalidArgumentError(
                f"substep {self.substep} s must not exceed the fastest sensor period {1.0 / fastest} s"
            )
        if self.tau < 0.0:
            raise InvalidArgumentError(f"actuator time constant must be >= 0, got {self.tau}")
        if not (self.saturation > 0.0):
            raise InvalidArgumentError(f"saturation must be positive, got {self.saturation}")
        object.__setattr__(self, "initial_pose", _as_floats(self.initial_pose, 3, "initial_pose"))
        object.__setattr__(self, "initial_rates", _as_floats(self.initial_rates, 2, "initial_rates"))

    def started_on(self, spec: TrajectorySpec) -> "PlantConfig":
        """Copy of the config with the initial pose on the trajectory start."""
        poses, _ = sample_many(spec, np.array([0.0]))
        return replace(self, initial_pose=tuple(float(v) for v in poses[0]))


def _as_floats(value, length, name):
    out = tuple(float(v) for v in value)
    if len(out) != length:
        raise InvalidArgumentError(f"{name} needs {length} entries, got {len(out)}")
    return out


@dataclass
class PlantState:
    pose: np.ndarray            # true [x, y, alpha]
    rates: np.ndarray           # achieved wheel rates [right, left]
    command: np.ndarray         # last commanded rates
    clock_ns: int = 0


@dataclass(frozen=True)
class Measurement:
    kind: str                   # "pose" or "rates"
    timestamp_ns: int
    values: tuple


def _effective_command(config: PlantConfig, command: np.ndarray) -> np.ndarray:
    u = np.clip(command, -config.saturation, config.saturation)
    u[np.abs(u) < config.deadzone_threshold] = 0.0
    return u


def plant_step(config: PlantConfig, state: PlantState, command, dt: float) -> PlantState:
    """Advance the truth by dt: lag toward the dead-zoned command, RK4 pose."""
    if not (dt > 0.0):
        raise InvalidArgumentError(f"dt must be positive, got {dt}")
    command = np.asarray(command, dtype=float).copy()
    u_eff = _effective_command(config, command)
    if config.tau > 0.0:
        decay = math.exp(-dt / config.tau)
        rates = u_eff + (state.rates - u_eff) * decay
    else:
        rates = u_eff.copy()

    r, c = config.platform.r, config.platform.c
    # the updated rates are held over the substep, so the twist magnitudes
    # are constant and only the heading varies inside the RK4 stages
    v = 0.5 * r * (rates[0] + rates[1])
    w = 0.5 * r / c * (rates[0] - rates[1])
    x, y, alpha = state.pose
    k1 = _pose_rate(alpha, v, w)
    k2 = _pose_rate(alpha + 0.5 * dt * k1[2], v, w)
    k3 = _pose_rate(alpha + 0.5 * dt * k2[2], v, w)
    k4 = _pose_rate(alpha + dt * k3[2], v, w)
    pose = np.array([
        x + dt / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
        y + dt / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]),
        alpha + dt * w,
    ])
    return PlantState(
        pose=pose,
        rates=rates,
        command=command,
        clock_ns=state.clock_ns + int(round(dt * 1e9)),
    )


def _pose_rate(alpha: float, v: float, w: float) -> tuple:
    return (v * math.cos(alpha), v * math.sin(alpha), w)


class Plant:
    """Stateful simulator with periodic noisy measurement emission."""

    def __init__(self, config: PlantConfig):
        self.config = config
        self.state = PlantState(
            pose=np.array(config.initial_pose, dtype=float),
            rates=np.array(config.initial_rates, dtype=float),
            command=np.array(config.initial_rates, dtype=float),
            clock_ns=0,
        )
        self.rng = random.Random(config.seed)
        self._pose_period_ns = int(round(1e9 / config.pose_rate_hz))
        self._rate_period_ns = int(round(1e9 / config.wheel_rate_hz))
        self._next_pose_ns = 0
        self._next_rate_ns = 0

    def emit_now(self) -> list[Measurement]:
        """Emit both channels at the current clock (used once at startup)."""
        out = [self._pose_measurement(), self._rates_measurement()]
        self._next_pose_ns = self.state.clock_ns + self._pose_period_ns
        self._next_rate_ns = self.state.clock_ns + self._rate_period_ns
        return out

    def advance(self, dt: float, command) -> list[Measurement]:
        """Advance by dt (a whole number of substeps), emitting on the way."""
        steps = int(round(dt / self.config.substep))
        if steps < 1 or abs(steps * self.config.substep - dt) > 1e-9:
            raise InvalidArgumentError(
                f"advance interval {dt} s is not a multiple of the substep {self.config.substep} s"
            )
        out: list[Measurement] = []
        for _ in range(steps):
            self.state = plant_step(self.config, self.state, command, self.config.substep)
            now = self.state.clock_ns
            while now >= self._next_rate_ns:
                out.append(self._rates_measurement())
                self._next_rate_ns += self._rate_period_ns
            while now >= self._next_pose_ns:
                out.append(self._pose_measurement())
                self._next_pose_ns += self._pose_period_ns
        return out

    def _pose_measurement(self) -> Measurement:
        x, y, alpha = self.state.pose
        sp = self.config.pose_noise_std_m
        sa = self.config.pose_noise_std_rad
        values = (
            x + (self.rng.gauss(0.0, sp) if sp > 0 else 0.0),
            y + (self.rng.gauss(0.0, sp) if sp > 0 else 0.0),
            alpha + (self.rng.gauss(0.0, sa) if sa > 0 else 0.0),
        )
        return Measurement("pose", self.state.clock_ns, values)

    def _rates_measurement(self) -> Measurement:
        right, left = self.state.rates
        sr = self.config.rate_noise_std
        values = (
            right + (self.rng.gauss(0.0, sr) if sr > 0 else 0.0),
            left + (self.rng.gauss(0.0, sr) if sr > 0 else 0.0),
        )
        return Measurement("rates", self.state.clock_ns, values)


def emit_measurements(config: PlantConfig, plant: Plant) -> list[Measurement]:
    """Measurements due at the plant's current clock (see Plant.advance)."""
    out = []
    now = plant.state.clock_ns
    while now >= plant._next_rate_ns:
        out.append(plant._rates_measurement())
        plant._next_rate_ns += plant._rate_period_ns
    while now >= plant._next_pose_ns:
        out.append(plant._pose_measurement())
        plant._next_pose_ns += plant._pose_period_ns
    return out


def open_loop_sine_test(
    config: PlantConfig,
    amplitude: float,
    period: float,
    duration: float,
) -> np.ndarray:
    """Command a sine to both wheels, record linear wheel velocities.

    Returns an (M, 3) array of (t [s], reference velocity, achieved velocity)
    for the right wheel, sampled every substep; velocities are r * rate.
    The achieved side shows the dead-zone clipping: nothing moves while the
    commanded magnitude sits below the threshold.
    """
    if not (amplitude > 0.0):
        raise InvalidArgumentError(f"amplitude must be positive, got {amplitude}")
    if not (period > 0.0 and duration > 0.0):
        raise InvalidArgumentError("period and duration must be positive")
    plant = Plant(config)
    steps = int(round(duration / config.substep))
    out = np.empty((steps, 3))
    r = config.platform.r
    omega = 2.0 * math.pi / period
    for i in range(steps):
        t = (i + 1) * config.substep
        cmd = amplitude * math.sin(omega * t)
        plant.state = plant_step(config, plant.state, (cmd, cmd), config.substep)
        out[i] = (t, r * cmd, r * plant.state.rates[0])
    return out
