"""Command-line entry points.

    skidnmpc gen-traj --config c.toml --out refs.csv [--dt 0.1] [--duration s]
    skidnmpc run-sim --config c.toml [--in-process] [--duration s]
                     [--truth-out t.csv] [--log-out l.csv] [--records-out r.csv]
    skidnmpc run-controller --config c.toml [--sim-time-scale f]
                            [--duration s] [--records-out r.csv]
    skidnmpc report --log l.csv --records r.csv --out dir [--thresholds t.toml]
    skidnmpc sine-test --config c.toml --amplitude A [--period s]
                       [--duration s] --out sine.csv
"""

from __future__ import annotations

import argparse
import sys
import threading
import time
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .config import load_config
from .controller import run_loop
from .errors import StartupFailureError
from .metrics import RunLog, report
from .plant import Plant, open_loop_sine_test
from .simrun import run_closed_loop
from .trajectories import sample_many
from .udp import Endpoint, Role


def _write_refs_csv(path, times, poses, rates):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,x,y,alpha,xdot,ydot,alphadot\n")
        for i in range(times.size):
            row = (times[i], *poses[i], *rates[i])
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_gen_traj(args) -> int:
    controller_cfg, _ = load_config(args.config)
    spec = controller_cfg.trajectory
    duration = args.duration if args.duration is not None else spec.duration()
    times = np.arange(0.0, duration + 0.5 * args.dt, args.dt)
    poses, rates = sample_many(spec, times)
    _write_refs_csv(args.out, times, poses, rates)
    print(f"wrote {times.size} reference samples to {args.out}")
    return 0


def cmd_run_sim(args) -> int:
    controller_cfg, plant_cfg = load_config(args.config)
    duration = args.duration if args.duration is not None else controller_cfg.trajectory.duration()
    if args.in_process:
        result = run_closed_loop(controller_cfg, plant_cfg, duration)
        if args.truth_out:
            _write_truth_csv(args.truth_out, result)
        if args.log_out:
            RunLog.from_sim(result).to_csv(args.log_out)
        if args.records_out:
            result.records.to_csv(args.records_out)
        from .metrics import position_errors

        pos = position_errors(RunLog.from_sim(result))
        print(f"simulated {duration:.1f} s: position e_rms {pos.e_rms * 100:.2f} cm "
              f"over {result.log_t_s.size} pose samples")
        return 0
    return _run_networked_plant(controller_cfg, plant_cfg, duration, args.truth_out)


def _write_truth_csv(path, result) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t_ns,x,y,alpha,rate_r,rate_l\n")
        for i in range(result.truth_t_s.size):
            fh.write(
                f"{int(round(result.truth_t_s[i] * 1e9))},"
                + ",".join(repr(float(v)) for v in result.truth_pose[i])
                + ","
                + ",".join(repr(float(v)) for v in result.truth_rates[i])
                + "\n"
            )


def _run_networked_plant(controller_cfg, plant_cfg, duration, truth_out) -> int:
    """Stream measurements over UDP and apply received commands."""
    net = controller_cfg.network
    plant = Plant(plant_cfg)
    pose_ep = Endpoint(Role.POSE_SOURCE, (net.host, net.pose_port))
    rate_ep = Endpoint(Role.RATE_SOURCE, (net.host, net.rate_port))
    cmd_ep = Endpoint(Role.COMMAND_SINK, (net.host, net.command_port))
    rows = []
    command = tuple(plant_cfg.initial_rates)
    step = plant_cfg.substep
    n_steps = int(round(duration / step))
    try:
        for m in plant.emit_now():
            _send(pose_ep, rate_ep, m)
        start = time.monotonic()
        for i in range(1, n_steps + 1):
            for m in plant.advance(step, command):
                _send(pose_ep, rate_ep, m)
            msg = cmd_ep.drain()
            if msg is not None:
                command = msg.payload
            if truth_out and i % 250 == 0:
                rows.append((plant.state.clock_ns, *plant.state.pose, *plant.state.rates))
            target = start + i * step
            delay = target - time.monotonic()
            if delay > 0:
                time.sleep(delay)
    except KeyboardInterrupt:
        pass
    finally:
        pose_ep.close()
        rate_ep.close()
        cmd_ep.close()
    if truth_out:
        with open(truth_out, "w", encoding="utf-8") as fh:
            fh.write("t_ns,x,y,alpha,rate_r,rate_l\n")
            for row in rows:
                fh.write(",".join(repr(float(v)) if i else str(int(v)) for i, v in enumerate(row)) + "\n")
    print(f"plant ran {duration:.1f} s; commands received: {cmd_ep.stats.received}")
    return 0


def _send(pose_ep, rate_ep, meas) -> None:
    if meas.kind == "pose":
        pose_ep.send(meas.values, meas.timestamp_ns)
    else:
        rate_ep.send(meas.values, meas.timestamp_ns)


def cmd_run_controller(args) -> int:
    controller_cfg, _ = load_config(args.config)
    duration = args.duration if args.duration is not None else controller_cfg.trajectory.duration()
    stop = threading.Event()
    try:
        sink = run_loop(controller_cfg, duration, time_scale=args.sim_time_scale, stop_event=stop)
    except StartupFailureError as err:
        print(f"startup failed: {err}", file=sys.stderr)
        return 2
    if args.records_out:
        sink.to_csv(args.records_out)
    solve_ns = sink.column("solve_ns")
    if solve_ns.size:
        print(f"controller ran {len(sink)} iterations; median solve "
              f"{np.median(solve_ns) * 1e-6:.3f} ms")
    return 0


def cmd_report(args) -> int:
    log = RunLog.from_csv(args.log)
    durations = np.genfromtxt(args.records, delimiter=",", skip_header=1, usecols=(3,))
    thresholds = None
    if args.thresholds:
        with open(args.thresholds, "rb") as fh:
            thresholds = tomllib.load(fh)
    violations = report(log, durations, args.out, thresholds=thresholds)
    print(Path(args.out, "summary.txt").read_text(encoding="utf-8"))
    return 1 if violations else 0


def cmd_sine_test(args) -> int:
    _, plant_cfg = load_config(args.config)
    series = open_loop_sine_test(plant_cfg, args.amplitude, args.period, args.duration)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("t_s,reference_velocity,measured_velocity\n")
        for row in series:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {series.shape[0]} sine-test samples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skidnmpc", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-traj", help="sample the configured reference trajectory to CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dt", type=float, default=0.1)
    p.add_argument("--duration", type=float, default=None)
    p.set_defaults(func=cmd_gen_traj)

    p = sub.add_parser("run-sim", help="run the plant (networked) or the whole loop (--in-process)")
    p.add_argument("--config", required=True)
    p.add_argument("--in-process", action="store_true")
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--truth-out", default=None)
    p.add_argument("--log-out", default=None)
    p.add_argument("--records-out", default=None)
    p.set_defaults(func=cmd_run_sim)

    p = sub.add_parser("run-controller", help="run the networked controller")
    p.add_argument("--config", required=True)
    p.add_argument("--sim-time-scale", type=float, default=1.0)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--records-out", default=None)
    p.set_defaults(func=cmd_run_controller)

    p = sub.add_parser("report", help="tracking-error and timing report from CSV logs")
    p.add_argument("--log", required=True)
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sine-test", help="open-loop sine response of the simulated actuators")
    p.add_argument("--config", required=True)
    p.add_argument("--amplitude", type=float, required=True)
    p.add_argument("--period", type=float, default=20.0)
    p.add_argument("--duration", type=float, default=40.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sine_test)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
