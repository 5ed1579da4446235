"""Post-run analysis: tracking-error statistics and timing percentiles.

Errors are computed against the timed reference at each measurement
timestamp (trajectory tracking, not nearest point on path).  The measured
planar velocity is recovered from the measured pose by a least-squares
slope over a sliding window; the window suppresses both the slow sensor
quantization and the position noise, and its length is configurable (a
plain two-point central difference is available as well).  Timing curves
use the empirical distribution of per-iteration durations and the
nearest-rank percentile definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "RunLog",
    "ErrorStats",
    "TimingSummary",
    "position_errors",
    "velocity_errors",
    "timing_percentiles",
    "report",
]


@dataclass
class RunLog:
    """Aligned time series of reference and measurement."""

    t_s: np.ndarray
    ref_pose: np.ndarray      # (M, 3)
    ref_rate: np.ndarray      # (M, 3)
    meas_pose: np.ndarray     # (M, 3)
    cmd: np.ndarray | None = None
    meas_rates: np.ndarray | None = None
    gaps_dropped: int = 0

    def __post_init__(self):
        self.t_s = np.asarray(self.t_s, dtype=float)
        self.ref_pose = np.asarray(self.ref_pose, dtype=float)
        self.ref_rate = np.asarray(self.ref_rate, dtype=float)
        self.meas_pose = np.asarray(self.meas_pose, dtype=float)
        m = self.t_s.size
        if self.ref_pose.shape != (m, 3) or self.meas_pose.shape != (m, 3) or self.ref_rate.shape != (m, 3):
            raise InvalidArgumentError("run log series must share one time base")
        # samples without a reference are dropped, never interpolated
        keep = np.all(np.isfinite(self.ref_pose), axis=1) & np.all(np.isfinite(self.meas_pose), axis=1)
        keep &= np.all(np.isfinite(self.ref_rate), axis=1) & np.isfinite(self.t_s)
        if not np.all(keep):
            self.gaps_dropped = int(np.sum(~keep))
            self.t_s = self.t_s[keep]
            self.ref_pose = self.ref_pose[keep]
            self.ref_rate = self.ref_rate[keep]
            self.meas_pose = self.meas_pose[keep]
            if self.cmd is not None:
                self.cmd = np.asarray(self.cmd, dtype=float)[keep]
            if self.meas_rates is not None:
                self.meas_rates = np.asarray(self.meas_rates, dtype=float)[keep]

    @staticmethod
    def from_sim(result) -> "RunLog":
        return RunLog(
            t_s=result.log_t_s,
            ref_pose=result.log_ref_pose,
            ref_rate=result.log_ref_rate,
            meas_pose=result.log_meas_pose,
            cmd=result.log_cmd,
            meas_rates=result.log_meas_rates,
        )

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("t_s,ref_x,ref_y,ref_alpha,ref_xdot,ref_ydot,ref_alphadot,"
                     "meas_x,meas_y,meas_alpha,cmd_r,cmd_l,rate_r,rate_l\n")
            cmd = self.cmd if self.cmd is not None else np.full((self.t_s.size, 2), math.nan)
            rates = self.meas_rates if self.meas_rates is not None else np.full((self.t_s.size, 2), math.nan)
            for i in range(self.t_s.size):
                row = [self.t_s[i], *self.ref_pose[i], *self.ref_rate[i], *self.meas_pose[i],
                       *cmd[i], *rates[i]]
                fh.write(",".join(repr(float(v)) for v in row) + "\n")

    @staticmethod
    def from_csv(path) -> "RunLog":
        data = np.genfromtxt(path, delimiter=",", skip_header=1)
        if data.ndim == 1:
            data = data[None, :]
        if data.shape[1] != 14:
            raise InvalidArgumentError(f"run log CSV needs 14 columns, found {data.shape[1]}")
        return RunLog(
            t_s=data[:, 0],
            ref_pose=data[:, 1:4],
            ref_rate=data[:, 4:7],
            meas_pose=data[:, 7:10],
            cmd=data[:, 10:12],
            meas_rates=data[:, 12:14],
        )


@dataclass(frozen=True)
class ErrorStats:
    e_avg: float
    e_rms: float
    series: np.ndarray


def position_errors(log: RunLog) -> ErrorStats:
    """Euclidean position error per sample, with mean and RMS."""
    if log.t_s.size == 0:
        raise InvalidArgumentError("empty run log")
    err = log.meas_pose[:, :2] - log.ref_pose[:, :2]
    series = np.hypot(err[:, 0], err[:, 1])
    return ErrorStats(float(np.mean(series)), float(np.sqrt(np.mean(series**2))), series)


def measured_velocity(
    t_s: np.ndarray,
    positions: np.ndarray,
    window_s: float = 2.5,
    method: str = "slope",
) -> np.ndarray:
    """Planar velocity estimate from sampled positions.

    "slope" fits a least-squares line over the window centered on each
    sample; "central" divides the displacement across the window by its
    duration.  Both are exact on straight uniform motion.
    """
    m = t_s.size
    if m < 2:
        raise InvalidArgumentError("need at least two samples to differentiate")
    dt = float(np.median(np.diff(t_s)))
    half = max(int(round(0.5 * window_s / dt)), 1)
    vel = np.empty((m, 2))
    if method == "central":
        for i in range(m):
            lo, hi = max(i - half, 0), min(i + half, m - 1)
            vel[i] = (positions[hi, :2] - positions[lo, :2]) / (t_s[hi] - t_s[lo])
        return vel
    if method != "slope":
        raise InvalidArgumentError(f"unknown velocity method {method!r}")
    # cumulative sums make each windowed least-squares slope O(1)
    t = t_s
    p = positions[:, :2]
    ct = np.concatenate([[0.0], np.cumsum(t)])
    cp = np.concatenate([np.zeros((1, 2)), np.cumsum(p, axis=0)])
    ctt = np.concatenate([[0.0], np.cumsum(t * t)])
    ctp = np.concatenate([np.zeros((1, 2)), np.cumsum(t[:, None] * p, axis=0)])
    for i in range(m):
        lo, hi = max(i - half, 0), min(i + half, m - 1)
        n = hi - lo + 1
        st = ct[hi + 1] - ct[lo]
        sp = cp[hi + 1] - cp[lo]
        stt = ctt[hi + 1] - ctt[lo]
        stp = ctp[hi + 1] - ctp[lo]
        denom = n * stt - st * st
        if denom <= 0.0:
            vel[i] = (p[hi] - p[lo]) / max(t[hi] - t[lo], 1e-12)
        else:
            vel[i] = (n * stp - st * sp) / denom
    return vel


def velocity_errors(log: RunLog, window_s: float = 2.5, method: str = "slope") -> ErrorStats:
    """Planar velocity error statistics from differenced measured pose."""
    if log.t_s.size < 2:
        raise InvalidArgumentError("need at least two samples for velocity errors")
    vel = measured_velocity(log.t_s, log.meas_pose, window_s=window_s, method=method)
    err = vel - log.ref_rate[:, :2]
    series = np.hypot(err[:, 0], err[:, 1])
    return ErrorStats(float(np.mean(series)), float(np.sqrt(np.mean(series**2))), series)


@dataclass(frozen=True)
class TimingSummary:
    grid_ns: np.ndarray
    fraction: np.ndarray
    p50: float
    p98: float
    p999: float
    max: float

    def fraction_at(self, t_ns: float) -> float:
        """Fraction of samples with duration <= t_ns."""
        idx = np.searchsorted(self.grid_ns, t_ns, side="right") - 1
        if idx < 0:
            return 0.0
        return float(self.fraction[idx])


def nearest_rank(sorted_samples: np.ndarray, q: float) -> float:
    """Nearest-rank percentile on pre-sorted samples (q in percent)."""
    n = sorted_samples.size
    rank = max(int(math.ceil(q / 100.0 * n)), 1)
    return float(sorted_samples[rank - 1])


def timing_percentiles(durations_ns, grid_points: int = 512) -> TimingSummary:
    """Empirical 'fraction faster than t' curve plus key percentiles."""
    samples = np.asarray(durations_ns, dtype=float).ravel()
    if samples.size < 1:
        raise InvalidArgumentError("need at least one duration sample")
    ordered = np.sort(samples)
    uniq = np.unique(ordered)
    if uniq.size > grid_points:
        idx = np.unique(np.linspace(0, uniq.size - 1, grid_points).astype(int))
        grid = uniq[idx]
    else:
        grid = uniq
    fraction = np.searchsorted(ordered, grid, side="right") / ordered.size
    return TimingSummary(
        grid_ns=grid,
        fraction=fraction,
        p50=nearest_rank(ordered, 50.0),
        p98=nearest_rank(ordered, 98.0),
        p999=nearest_rank(ordered, 99.9),
        max=float(ordered[-1]),
    )


def report(
    log: RunLog,
    durations_ns,
    out_dir,
    thresholds: dict | None = None,
    velocity_window_s: float = 2.5,
) -> list[str]:
    """Write errors.csv, timing.csv and summary.txt; return violations.

    `thresholds` may bound position_e_avg, position_e_rms, velocity_e_avg,
    velocity_e_rms (meters, m/s) and timing_p98_ms.  Output bytes depend
    only on the inputs, so a rerun reproduces identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pos = position_errors(log)
    vel = velocity_errors(log, window_s=velocity_window_s)
    timing = timing_percentiles(durations_ns)
    if not pos.e_rms >= pos.e_avg - 1e-12:
        raise ArithmeticError("position RMS fell below the mean error")
    if not vel.e_rms >= vel.e_avg - 1e-12:
        raise ArithmeticError("velocity RMS fell below the mean error")

    with open(out / "errors.csv", "w", encoding="utf-8") as fh:
        fh.write("t_s,pos_err_m,vel_err_mps\n")
        for i in range(log.t_s.size):
            fh.write(f"{log.t_s[i]!r},{pos.series[i]!r},{vel.series[i]!r}\n")

    with open(out / "timing.csv", "w", encoding="utf-8") as fh:
        fh.write("duration_ns,fraction_at_or_below\n")
        for g, f in zip(timing.grid_ns, timing.fraction):
            fh.write(f"{g!r},{f!r}\n")

    checks = {
        "position_e_avg": pos.e_avg,
        "position_e_rms": pos.e_rms,
        "velocity_e_avg": vel.e_avg,
        "velocity_e_rms": vel.e_rms,
        "timing_p98_ms": timing.p98 * 1e-6,
    }
    violations = []
    for key, limit in (thresholds or {}).items():
        if key not in checks:
            raise InvalidArgumentError(f"unknown threshold {key!r}")
        if checks[key] > limit:
            violations.append(f"{key} = {checks[key]:.6g} exceeds limit {limit:.6g}")

    lines = [
        "tracking error report",
        "=====================",
        f"samples: {log.t_s.size} (dropped {log.gaps_dropped} without reference)",
        f"position e_avg: {pos.e_avg * 100.0:.3f} cm",
        f"position e_rms: {pos.e_rms * 100.0:.3f} cm",
        f"velocity e_avg: {vel.e_avg * 1000.0:.3f} mm/s",
        f"velocity e_rms: {vel.e_rms * 1000.0:.3f} mm/s",
        f"timing p50: {timing.p50 * 1e-6:.3f} ms",
        f"timing p98: {timing.p98 * 1e-6:.3f} ms",
        f"timing p99.9: {timing.p999 * 1e-6:.3f} ms",
        f"timing max: {timing.max * 1e-6:.3f} ms",
        "",
        "velocity errors use planar velocity recovered from the measured pose "
        f"(least-squares slope over a {velocity_window_s:g} s window), not the "
        "commanded wheel speeds.",
    ]
    if violations:
        lines.append("")
        lines.append("THRESHOLD VIOLATIONS:")
        lines.extend("  " + v for v in violations)
    else:
        lines.append("")
        lines.append("all configured thresholds satisfied")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return violations
