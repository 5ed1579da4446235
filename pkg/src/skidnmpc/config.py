"""TOML configuration for the controller, plant and trajectories.

Recognized sections: [platform], [horizon], [weights], [bounds],
[trajectory], [solver], [network] and [plant].  Every key is optional and
falls back to the module defaults; unknown sections or keys, and values of
the wrong shape, are rejected with an error naming the section and key.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import InvalidArgumentError
from .model import Integrator, PlatformParams
from .plant import PlantConfig
from .solver import SolverMode, SolverSettings
from .trajectories import TrajectoryKind, TrajectorySpec
from .transcription import Bounds, HorizonConfig, Weights
from .udp import DEFAULT_COMMAND_PORT, DEFAULT_POSE_PORT, DEFAULT_RATE_PORT

__all__ = ["ConfigError", "NetworkConfig", "ControllerConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    def __init__(self, section: str, key: str | None, message: str):
        where = f"[{section}]" + (f" key '{key}'" if key else "")
        super().__init__(f"{where}: {message}")
        self.section = section
        self.key = key


@dataclass(frozen=True)
class NetworkConfig:
    host: str = "127.0.0.1"
    pose_port: int = DEFAULT_POSE_PORT
    rate_port: int = DEFAULT_RATE_PORT
    command_port: int = DEFAULT_COMMAND_PORT
    loop_period_s: float = 0.001
    startup_timeout_s: float = 5.0
    max_consecutive_failures: int = 100

    def __post_init__(self):
        if not (self.loop_period_s > 0.0):
            raise InvalidArgumentError(f"loop period must be positive, got {self.loop_period_s}")
        if not (self.startup_timeout_s > 0.0):
            raise InvalidArgumentError("startup timeout must be positive")
        if self.max_consecutive_failures < 1:
            raise InvalidArgumentError("max_consecutive_failures must be >= 1")


@dataclass(frozen=True)
class ControllerConfig:
    platform: PlatformParams = PlatformParams()
    horizon: HorizonConfig = HorizonConfig()
    weights: Weights = Weights()
    bounds: Bounds = Bounds()
    trajectory: TrajectorySpec = TrajectorySpec(TrajectoryKind.CIRCLE, period=251.32741228718345)
    refine: SolverSettings = SolverSettings(mode=SolverMode.REFINE)
    realtime: SolverSettings = SolverSettings(mode=SolverMode.REAL_TIME)
    network: NetworkConfig = NetworkConfig()


class _Section:
    """Typed accessor over one TOML table that tracks unknown keys."""

    def __init__(self, name: str, table: dict):
        self.name = name
        self.table = dict(table)

    def take(self, key: str, kind, default):
        if key not in self.table:
            return default
        raw = self.table.pop(key)
        try:
            if kind is float:
                if isinstance(raw, bool) or not isinstance(raw, (int, float)):
                    raise TypeError
                return float(raw)
            if kind is int:
                if isinstance(raw, bool) or not isinstance(raw, int):
                    raise TypeError
                return int(raw)
            if kind is bool:
                if not isinstance(raw, bool):
                    raise TypeError
                return raw
            if kind is str:
                if not isinstance(raw, str):
                    raise TypeError
                return raw
            if kind == "floats":
                if not isinstance(raw, (list, tuple)) or not all(
                    isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw
                ):
                    raise TypeError
                return tuple(float(v) for v in raw)
        except TypeError:
            raise ConfigError(self.name, key, f"expected {kind if isinstance(kind, str) else kind.__name__}, got {raw!r}") from None
        raise ConfigError(self.name, key, f"unsupported type spec {kind!r}")

    def finish(self):
        if self.table:
            key = sorted(self.table)[0]
            raise ConfigError(self.name, key, "unknown key")


def parse_config(text: str) -> tuple[ControllerConfig, PlantConfig]:
    """Parse a TOML document into controller and plant configurations."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError("document", None, f"not valid TOML: {err}") from None

    known = {"platform", "horizon", "weights", "bounds", "trajectory", "solver", "network", "plant"}
    for section in doc:
        if section not in known:
            raise ConfigError(section, None, "unknown section")
        if not isinstance(doc[section], dict):
            raise ConfigError(section, None, "expected a table")

    sec = _Section("platform", doc.get("platform", {}))
    try:
        platform = PlatformParams(
            r=sec.take("r", float, 0.3),
            c=sec.take("c", float, 1.0),
            a=sec.take("a", float, 0.85),
            deadzone_delta=sec.take("deadzone_delta", float, 0.05),
            deadzone_kappa=sec.take("deadzone_kappa", float, 100.0),
        )
    except InvalidArgumentError as err:
        raise ConfigError("platform", None, str(err)) from None
    sec.finish()

    sec = _Section("horizon", doc.get("horizon", {}))
    integrator_name = sec.take("integrator", str, "euler")
    try:
        integrator = Integrator(integrator_name.lower())
    except ValueError:
        raise ConfigError("horizon", "integrator", f"unknown integrator {integrator_name!r}") from None
    try:
        horizon = HorizonConfig(
            n=sec.take("n", int, 30),
            dt=sec.take("dt", float, 0.1),
            integrator=integrator,
            deadzone_in_model=sec.take("deadzone_in_model", bool, True),
        )
    except InvalidArgumentError as err:
        raise ConfigError("horizon", None, str(err)) from None
    sec.finish()

    sec = _Section("weights", doc.get("weights", {}))
    try:
        weights = Weights(
            q_x=sec.take("q_x", "floats", (20.0, 20.0, 12.0)),
            q_xdot=sec.take("q_xdot", "floats", (1.0, 1.0, 1.0)),
            r=sec.take("r", "floats", (0.2, 0.2)),
            q_x_terminal=sec.take("q_x_terminal", "floats", (20.0, 20.0, 12.0)),
            q_xdot_terminal=sec.take("q_xdot_terminal", "floats", (1.0, 1.0, 1.0)),
        )
    except InvalidArgumentError as err:
        raise ConfigError("weights", None, str(err)) from None
    sec.finish()

    sec = _Section("bounds", doc.get("bounds", {}))
    try:
        bounds = Bounds(
            x_min=sec.take("x_min", "floats", (-math.inf,) * 3),
            x_max=sec.take("x_max", "floats", (math.inf,) * 3),
            rate_min=sec.take("rate_min", "floats", (0.1, 0.1)),
            rate_max=sec.take("rate_max", "floats", (0.8, 0.8)),
            accel_min=sec.take("accel_min", "floats", (-0.2, -0.2)),
            accel_max=sec.take("accel_max", "floats", (0.2, 0.2)),
        )
    except InvalidArgumentError as err:
        raise ConfigError("bounds", None, str(err)) from None
    sec.finish()

    sec = _Section("trajectory", doc.get("trajectory", {}))
    kind_name = sec.take("kind", str, "circle")
    try:
        kind = TrajectoryKind(kind_name.lower())
    except ValueError:
        raise ConfigError("trajectory", "kind", f"unknown trajectory kind {kind_name!r}") from None
    try:
        trajectory = TrajectorySpec(
            kind=kind,
            period=sec.take("period", float, 251.32741228718345),
            diameter=sec.take("diameter", float, 12.0),
            width=sec.take("width", float, 19.0),
            height=sec.take("height", float, 10.0),
            laps=sec.take("laps", int, 1),
            start_time=sec.take("start_time", float, 0.0),
        )
    except InvalidArgumentError as err:
        raise ConfigError("trajectory", None, str(err)) from None
    sec.finish()

    sec = _Section("solver", doc.get("solver", {}))
    try:
        tolerance = sec.take("tolerance", float, 1e-6)
        regularization = sec.take("regularization", float, 1e-8)
        refine = SolverSettings(
            tolerance=tolerance,
            max_iterations=sec.take("refine_max_iterations", int, 200),
            mode=SolverMode.REFINE,
            regularization=regularization,
        )
        realtime = SolverSettings(
            tolerance=tolerance,
            max_iterations=sec.take("realtime_max_iterations", int, 1),
            mode=SolverMode.REAL_TIME,
            regularization=regularization,
        )
    except InvalidArgumentError as err:
        raise ConfigError("solver", None, str(err)) from None
    sec.finish()

    sec = _Section("network", doc.get("network", {}))
    try:
        network = NetworkConfig(
            host=sec.take("host", str, "127.0.0.1"),
            pose_port=sec.take("pose_port", int, DEFAULT_POSE_PORT),
            rate_port=sec.take("rate_port", int, DEFAULT_RATE_PORT),
            command_port=sec.take("command_port", int, DEFAULT_COMMAND_PORT),
            loop_period_s=sec.take("loop_period_s", float, 0.001),
            startup_timeout_s=sec.take("startup_timeout_s", float, 5.0),
            max_consecutive_failures=sec.take("max_consecutive_failures", int, 100),
        )
    except InvalidArgumentError as err:
        raise ConfigError("network", None, str(err)) from None
    sec.finish()

    sec = _Section("plant", doc.get("plant", {}))
    initial_pose = sec.take("initial_pose", "floats", None)
    try:
        plant = PlantConfig(
            platform=platform,
            deadzone_threshold=sec.take("deadzone_threshold", float, 0.08),
            tau=sec.take("tau", float, 0.15),
            saturation=sec.take("saturation", float, 1.0),
            pose_noise_std_m=sec.take("pose_noise_std_m", float, 0.01),
            pose_noise_std_rad=sec.take("pose_noise_std_rad", float, 0.005),
            rate_noise_std=sec.take("rate_noise_std", float, 0.005),
            pose_rate_hz=sec.take("pose_rate_hz", float, 20.0),
            wheel_rate_hz=sec.take("wheel_rate_hz", float, 1000.0),
            seed=sec.take("seed", int, 2024),
            substep=sec.take("substep", float, 0.001),
            initial_rates=sec.take("initial_rates", "floats", (0.0, 0.0)),
        )
    except InvalidArgumentError as err:
        raise ConfigError("plant", None, str(err)) from None
    sec.finish()
    if initial_pose is None:
        plant = plant.started_on(trajectory)
    else:
        if len(initial_pose) != 3:
            raise ConfigError("plant", "initial_pose", "needs exactly 3 entries")
        plant = dataclasses.replace(plant, initial_pose=initial_pose)

    controller = ControllerConfig(
        platform=platform,
        horizon=horizon,
        weights=weights,
        bounds=bounds,
        trajectory=trajectory,
        refine=refine,
        realtime=realtime,
        network=network,
    )
    return controller, plant


def load_config(path: str | Path) -> tuple[ControllerConfig, PlantConfig]:
    return parse_config(Path(path).read_text(encoding="utf-8"))
