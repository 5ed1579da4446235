"""Real-time NMPC execution pipeline.

Per control period the controller reads the latest sensor snapshot from a
pair of overwrite mailboxes (no queues: a fresh value replaces the stale
one, the loop never blocks on sensor arrival), refreshes the horizon
references at the current mission time, rebuilds the NLP pinned to the
snapshot, runs one bounded real-time solve warm started from the shifted
previous solution, emits the second control of the plan, and shifts the
solution for the next period.

Emitted commands are safety-clamped so rate bounds and the slew limit hold
on every path, including solver failures, where the previously computed
sequence is simply consumed one step further.  Repeated failures raise a
halt error.  All per-iteration bookkeeping lands in a bounded columnar
record sink (drop-oldest on overflow, drops counted).
"""

from __future__ import annotations

import gc
import math
import threading
import time
from dataclasses import dataclass

import numpy as np

from .config import ControllerConfig
from .errors import ControllerHaltError, StartupFailureError
from .model import WheelRates
from .se2 import Pose
from .solver import SolverState, SolverStatus, solve, warm_start_shift
from .trajectories import check_speed_band, horizon_references, sample_many
from .transcription import DecisionVector, build_nlp
from .udp import Endpoint, Role

__all__ = [
    "SensorSnapshot",
    "IterationRecord",
    "RecordSink",
    "LatestMailbox",
    "Controller",
    "run_loop",
    "STATUS_CODES",
]

STATUS_CODES = {
    SolverStatus.CONVERGED: 0,
    SolverStatus.ITERATION_LIMIT: 1,
    SolverStatus.NUMERIC_FAILURE: 2,
}
STATUS_NAMES = {v: k.value for k, v in STATUS_CODES.items()}

_TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class SensorSnapshot:
    pose: Pose
    pose_timestamp_ns: int
    rates: WheelRates
    rates_timestamp_ns: int


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    t_wall_ns: int
    solve_ns: int
    total_ns: int
    status: SolverStatus
    command: WheelRates
    pose_age_ms: float
    rate_age_ms: float
    sqp_iterations: int


class LatestMailbox:
    """Overwrite mailbox: single writer per channel, single reader.

    Each channel holds one immutable (timestamp, values) cell that the
    writer replaces atomically, so the reader always sees a consistent
    latest pair and nothing ever queues.
    """

    __slots__ = ("_pose", "_rates")

    def __init__(self):
        self._pose = None
        self._rates = None

    def write_pose(self, timestamp_ns: int, x: float, y: float, alpha: float) -> None:
        cell = self._pose
        if cell is None or timestamp_ns >= cell[0]:
            self._pose = (timestamp_ns, x, y, alpha)

    def write_rates(self, timestamp_ns: int, right: float, left: float) -> None:
        cell = self._rates
        if cell is None or timestamp_ns >= cell[0]:
            self._rates = (timestamp_ns, right, left)

    def ready(self) -> bool:
        return self._pose is not None and self._rates is not None

    def snapshot(self) -> SensorSnapshot | None:
        pose = self._pose
        rates = self._rates
        if pose is None or rates is None:
            return None
        return SensorSnapshot(
            pose=Pose(pose[1], pose[2], pose[3]),
            pose_timestamp_ns=pose[0],
            rates=WheelRates(rates[1], rates[2]),
            rates_timestamp_ns=rates[0],
        )


class RecordSink:
    """Bounded columnar store of iteration records; drop-oldest on overflow."""

    def __init__(self, capacity: int = 2_000_000):
        self.capacity = int(capacity)
        self.dropped = 0
        self._n = 0
        self._start = 0
        self.iteration = np.empty(self.capacity, dtype=np.int64)
        self.t_wall_ns = np.empty(self.capacity, dtype=np.int64)
        self.solve_ns = np.empty(self.capacity, dtype=np.int64)
        self.total_ns = np.empty(self.capacity, dtype=np.int64)
        self.status = np.empty(self.capacity, dtype=np.int8)
        self.cmd_r = np.empty(self.capacity, dtype=np.float64)
        self.cmd_l = np.empty(self.capacity, dtype=np.float64)
        self.pose_age_ms = np.empty(self.capacity, dtype=np.float64)
        self.rate_age_ms = np.empty(self.capacity, dtype=np.float64)
        self.sqp_iterations = np.empty(self.capacity, dtype=np.int16)

    def __len__(self) -> int:
        return self._n

    def append(self, iteration, t_wall_ns, solve_ns, total_ns, status_code,
               cmd_r, cmd_l, pose_age_ms, rate_age_ms, sqp_iterations) -> None:
        if self._n == self.capacity:
            idx = self._start
            self._start = (self._start + 1) % self.capacity
            self.dropped += 1
        else:
            idx = (self._start + self._n) % self.capacity
            self._n += 1
        self.iteration[idx] = iteration
        self.t_wall_ns[idx] = t_wall_ns
        self.solve_ns[idx] = solve_ns
        self.total_ns[idx] = total_ns
        self.status[idx] = status_code
        self.cmd_r[idx] = cmd_r
        self.cmd_l[idx] = cmd_l
        self.pose_age_ms[idx] = pose_age_ms
        self.rate_age_ms[idx] = rate_age_ms
        self.sqp_iterations[idx] = sqp_iterations

    def column(self, name: str) -> np.ndarray:
        arr = getattr(self, name)
        idx = (self._start + np.arange(self._n)) % self.capacity
        return arr[idx]

    def to_csv(self, path) -> None:
        cols = ["iteration", "t_wall_ns", "solve_ns", "total_ns", "status",
                "cmd_r", "cmd_l", "pose_age_ms", "rate_age_ms"]
        data = {c: self.column(c) for c in cols}
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("iter,t_wall_ns,solve_ns,total_ns,status,cmd_r,cmd_l,pose_age_ms,rate_age_ms\n")
            for i in range(self._n):
                fh.write(
                    f"{data['iteration'][i]},{data['t_wall_ns'][i]},{data['solve_ns'][i]},"
                    f"{data['total_ns'][i]},{STATUS_NAMES[int(data['status'][i])]},"
                    f"{data['cmd_r'][i]!r},{data['cmd_l'][i]!r},"
                    f"{data['pose_age_ms'][i]:.3f},{data['rate_age_ms'][i]:.3f}\n"
                )


class Controller:
    """Receding-horizon controller bound to one configuration."""

    def __init__(self, config: ControllerConfig):
        self.config = config
        self.state: SolverState | None = None
        self.previous_command: WheelRates | None = None
        self.consecutive_failures = 0
        self.initialized = False
        self._ref_anchor: float | None = None
        self._iteration = 0
        cfg = config
        self._slew_budget = (
            float(max(cfg.bounds.accel_max)) * cfg.horizon.dt + 10.0 * cfg.refine.tolerance
        )
        self._rate_lo = np.asarray(cfg.bounds.rate_min)
        self._rate_hi = np.asarray(cfg.bounds.rate_max)
        # the plan advances one horizon slot once a full horizon step of
        # mission time has elapsed, regardless of the (faster) loop period
        self._shift_period_ns = int(round(cfg.horizon.dt * 1e9))
        self._next_shift_ns = self._shift_period_ns

    # -- initialization -----------------------------------------------------

    def initialize(self, snapshot: SensorSnapshot, now_ns: int) -> SolverState:
        """Refined first solve used as the warm start of the online loop."""
        cfg = self.config
        check_speed_band(
            cfg.trajectory, cfg.platform.r, float(min(cfg.bounds.rate_min)),
            float(max(cfg.bounds.rate_max)),
        )
        t0 = now_ns * 1e-9
        poses, rates = horizon_references(cfg.trajectory, t0, cfg.horizon.n, cfg.horizon.dt)
        self._ref_anchor = float(poses[0, 2])
        meas_pose = self._rebranch(snapshot.pose, poses[0, 2])
        problem = build_nlp(cfg.horizon, cfg.weights, cfg.bounds, cfg.platform,
                            (poses, rates), meas_pose, snapshot.rates)
        primal = self._initial_plan(meas_pose, snapshot.rates, rates)
        state = SolverState.new(problem, primal=primal.z, hessian_diag=self._hessian_diag())
        state, status = solve(problem, state, cfg.refine)
        if status is SolverStatus.NUMERIC_FAILURE:
            raise StartupFailureError("refine solve failed numerically during startup")
        self.state = state
        self.initialized = True
        self.previous_command = None
        self.consecutive_failures = 0
        self._iteration = 0
        self._next_shift_ns = now_ns + self._shift_period_ns
        return state

    def _hessian_diag(self) -> np.ndarray:
        # rough curvature of the tracking cost: position/heading entries feel
        # the pose weights, controls mostly the effort weight
        cfg = self.config
        n = cfg.horizon.n
        diag = np.empty(cfg.horizon.n_vars)
        state_scale = np.maximum(np.asarray(cfg.weights.q_x) + np.asarray(cfg.weights.q_xdot), 1e-2)
        ctrl_scale = np.full(2, max(float(max(cfg.weights.r)), 1e-2) + 0.1)
        for k in range(n + 1):
            diag[5 * k : 5 * k + 3] = state_scale
            if k < n:
                diag[5 * k + 3 : 5 * k + 5] = ctrl_scale
        return diag

    def _initial_plan(self, meas_pose: Pose, meas_rates: WheelRates, ref_rates) -> DecisionVector:
        """Fully feasible first guess: wheel rates realizing the reference,
        reached from the measured rates by a slew-limited ramp."""
        cfg = self.config
        r, c = cfg.platform.r, cfg.platform.c
        slew = np.asarray(cfg.bounds.accel_max) * cfg.horizon.dt
        controls = np.empty((cfg.horizon.n, 2))
        controls[0] = meas_rates.as_array()
        for k in range(1, cfg.horizon.n):
            v = math.hypot(ref_rates[k, 0], ref_rates[k, 1])
            w = ref_rates[k, 2]
            target = np.array([(v + c * w) / r, (v - c * w) / r])
            stepped = np.clip(target, controls[k - 1] - slew, controls[k - 1] + slew)
            controls[k] = np.clip(stepped, self._rate_lo, self._rate_hi)
        return DecisionVector.from_rollout(cfg.horizon, cfg.platform, meas_pose, controls)

    def _rebranch(self, pose: Pose, reference_alpha: float) -> Pose:
        # measured heading moved onto the unwrapped reference branch
        k = round((reference_alpha - pose.alpha) / _TWO_PI)
        if k == 0:
            return pose
        return Pose(pose.x, pose.y, pose.alpha + _TWO_PI * k)

    # -- one control period ---------------------------------------------------

    def control_step(self, snapshot: SensorSnapshot, now_ns: int):
        """One bounded re-solve; returns (command, IterationRecord)."""
        if not self.initialized:
            raise StartupFailureError("control_step before initialize")
        cfg = self.config
        t_start = time.perf_counter_ns()
        t0 = now_ns * 1e-9
        poses, rates = horizon_references(
            cfg.trajectory, t0, cfg.horizon.n, cfg.horizon.dt, anchor_alpha=self._ref_anchor
        )
        self._ref_anchor = float(poses[0, 2])
        meas_pose = self._rebranch(snapshot.pose, poses[0, 2])
        problem = build_nlp(cfg.horizon, cfg.weights, cfg.bounds, cfg.platform,
                            (poses, rates), meas_pose, snapshot.rates)

        t_solve = time.perf_counter_ns()
        state, status = solve(problem, self.state, cfg.realtime)
        solve_ns = time.perf_counter_ns() - t_solve

        if status is SolverStatus.NUMERIC_FAILURE:
            self.consecutive_failures += 1
            if self.consecutive_failures >= cfg.network.max_consecutive_failures:
                raise ControllerHaltError(
                    f"{self.consecutive_failures} consecutive solver failures"
                )
        else:
            self.consecutive_failures = 0

        # second control of the plan is the command; on failure this is the
        # previously computed sequence consumed one step further
        z = state.primal
        command = self._clamp_command(z[8], z[9])
        if now_ns >= self._next_shift_ns:
            warm_start_shift(state, new_tail_reference=Pose.from_vector(poses[-1]))
            self._next_shift_ns += self._shift_period_ns

        total_ns = time.perf_counter_ns() - t_start
        record = IterationRecord(
            iteration=self._iteration,
            t_wall_ns=t_start,
            solve_ns=solve_ns,
            total_ns=total_ns,
            status=status,
            command=command,
            pose_age_ms=(now_ns - snapshot.pose_timestamp_ns) * 1e-6,
            rate_age_ms=(now_ns - snapshot.rates_timestamp_ns) * 1e-6,
            sqp_iterations=state.iterations_used,
        )
        self._iteration += 1
        self.previous_command = command
        return command, record

    def _clamp_command(self, right: float, left: float) -> WheelRates:
        cmd = np.array([right, left])
        prev = self.previous_command
        if prev is not None:
            lo = np.array([prev.right, prev.left]) - self._slew_budget
            hi = np.array([prev.right, prev.left]) + self._slew_budget
            cmd = np.clip(cmd, lo, hi)
        cmd = np.clip(cmd, self._rate_lo, self._rate_hi)
        return WheelRates(float(cmd[0]), float(cmd[1]))


# ---------------------------------------------------------------------------
# networked loop: UDP sensors in, UDP commands out


def _ingest(endpoint: Endpoint, write, stop: threading.Event, idle_s: float) -> None:
    while not stop.is_set():
        msg = endpoint.drain()
        if msg is None:
            time.sleep(idle_s)
        else:
            write(msg.timestamp_ns, *msg.payload)


def run_loop(
    config: ControllerConfig,
    duration_s: float,
    time_scale: float = 1.0,
    stop_event: threading.Event | None = None,
    record_capacity: int = 2_000_000,
) -> RecordSink:
    """Drive the controller against live UDP channels.

    Sensor ingestion runs in one thread per channel with latest-value-wins
    mailboxes; the loop itself is strictly sequential and never blocks on
    sensor arrival.  `time_scale` > 1 runs mission time faster than wall
    time.  Returns the record sink (one record per loop iteration).
    """
    if not (time_scale > 0.0):
        raise StartupFailureError(f"time scale must be positive, got {time_scale}")
    net = config.network
    stop = stop_event or threading.Event()
    mailbox = LatestMailbox()
    sink = RecordSink(record_capacity)
    controller = Controller(config)

    pose_ep = Endpoint(Role.POSE_SINK, (net.host, net.pose_port))
    rate_ep = Endpoint(Role.RATE_SINK, (net.host, net.rate_port))
    cmd_ep = Endpoint(Role.COMMAND_SOURCE, (net.host, net.command_port))
    threads = [
        threading.Thread(target=_ingest, args=(pose_ep, mailbox.write_pose, stop, 0.002), daemon=True),
        threading.Thread(target=_ingest, args=(rate_ep, mailbox.write_rates, stop, 0.0002), daemon=True),
    ]
    for t in threads:
        t.start()

    try:
        deadline = time.monotonic() + net.startup_timeout_s
        while not mailbox.ready():
            if time.monotonic() > deadline:
                missing = "wheel-rate" if mailbox._pose is not None else "pose"
                raise StartupFailureError(f"no {missing} data within {net.startup_timeout_s} s")
            if stop.is_set():
                raise StartupFailureError("stopped before sensor data arrived")
            time.sleep(0.001)

        wall_start = time.monotonic()
        controller.initialize(mailbox.snapshot(), now_ns=0)
        n_ticks = int(round(duration_s / net.loop_period_s))
        period_wall = net.loop_period_s / time_scale
        send_backoff = 0
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for i in range(1, n_ticks + 1):
                mission_ns = int(round(i * net.loop_period_s * 1e9))
                command, record = controller.control_step(mailbox.snapshot(), mission_ns)
                if send_backoff > 0:
                    send_backoff -= 1
                elif not cmd_ep.send((command.right, command.left), mission_ns):
                    send_backoff = min(2 ** cmd_ep.stats.send_errors, 256)
                sink.append(
                    record.iteration, record.t_wall_ns, record.solve_ns, record.total_ns,
                    STATUS_CODES[record.status], command.right, command.left,
                    record.pose_age_ms, record.rate_age_ms, record.sqp_iterations,
                )
                if stop.is_set():
                    break
                target = wall_start + i * period_wall
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
        finally:
            if gc_was_enabled:
                gc.enable()
    finally:
        stop.set()
        for t in threads:
            t.join(timeout=1.0)
        pose_ep.close()
        rate_ep.close()
        cmd_ep.close()
    return sink
