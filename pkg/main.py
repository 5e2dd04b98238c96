"""
edgebot command line
Usage: python main.py <simulate|robot|edge|eval|run> [options]
"""
import argparse
import asyncio
import sys
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import yaml

from edgebot.core.config import settings
from edgebot.core.config_loader import RunConfig, load_run_config
from edgebot.core.errors import EdgebotError, RobotSessionAborted
from edgebot.core.logging import app_logger
from edgebot.services.edge_controller import EdgeController, run_edge
from edgebot.services.evaluation import build_report
from edgebot.services.experiment import run_experiment
from edgebot.services.robot_node import RobotSession, run_robot
from edgebot.services.simulator import build_scenario, generate_streams
from edgebot.services.transport import (
    LoopbackTransport,
    TcpTransport,
    accept_one,
    bound_port,
    listen,
)
from edgebot.utils.svg_plot import write_overlay
from edgebot.utils.trajectory_io import (
    split_trajectory,
    write_odometry_csv,
    write_records_csv,
    write_rtt_csv,
    write_trajectory_csv,
)


def parse_address(addr: Optional[str]) -> Tuple[str, int]:
    """'host:port', ':port' or 'port' -> (host, port); defaults from settings"""
    if not addr:
        return settings.listen_host, settings.listen_port
    host, _, port = addr.rpartition(":")
    return host or settings.listen_host, int(port)


def parse_args(argv=None):
    """Parse command line arguments"""
    parser = argparse.ArgumentParser(
        prog="edgebot",
        description="Edge-offloaded robot localization: simulator, robot node, edge controller and evaluation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_source(p):
        p.add_argument("--config", default=None, help="YAML run configuration (e.g. config/exp1.yaml)")
        p.add_argument("--preset", default=None, help="Scenario preset when no config is given (exp1, exp2)")
        p.add_argument("--seed", type=int, default=None, help="Override the configured seed")

    p = sub.add_parser("simulate", help="Dump ground truth and sensor streams as CSV")
    add_source(p)
    p.add_argument("--out", required=True, help="Output directory")

    p = sub.add_parser("robot", help="Run the robot node against a listening edge")
    add_source(p)
    p.add_argument("--connect", default=None, help="Edge address host:port")
    p.add_argument("--closed-loop", action="store_true", help="Drive a unicycle from edge commands")

    p = sub.add_parser("edge", help="Serve one robot session")
    add_source(p)
    p.add_argument("--listen", default=None, help="Listen address host:port")
    p.add_argument("--out", default=None, help="Output directory")

    p = sub.add_parser("eval", help="Run the seeds x methods comparison")
    p.add_argument("--config", required=True, help="YAML configuration with an experiment section")
    p.add_argument("--out", default=None, help="Output directory")

    p = sub.add_parser("run", help="Run robot and edge together")
    add_source(p)
    p.add_argument("--mode", choices=["loopback", "sockets"], default="loopback")
    p.add_argument("--closed-loop", action="store_true", help="Drive a unicycle from edge commands")
    p.add_argument("--listen", default=None, help="Listen address for --mode sockets (port 0 picks one)")
    p.add_argument("--out", default=None, help="Output directory")

    return parser.parse_args(argv)


def load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return RunConfig.from_preset(args.preset or "exp1", seed=args.seed or 0)


def make_session(cfg: RunConfig, seed: int, closed_loop: bool) -> RobotSession:
    scenario = build_scenario(cfg.scenario_config(seed))
    robot_cfg = cfg.robot
    if closed_loop:
        robot_cfg = robot_cfg.model_copy(update={"closed_loop": True})
    return RobotSession(scenario, robot_cfg, seed=seed)


def make_controller(cfg: RunConfig, seed: int, solve_in_executor: bool = True) -> EdgeController:
    return EdgeController(
        build_scenario(cfg.scenario_config(seed)),
        scheduler=cfg.scheduler,
        planner=cfg.planner,
        keyframes=cfg.keyframes,
        detector=cfg.detector,
        solver=cfg.solver,
        solve_in_executor=solve_in_executor,
    )


def print_yaml(title: str, data: dict) -> None:
    print(yaml.safe_dump({title: data}, sort_keys=False), end="", flush=True)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    scenario = build_scenario(cfg.scenario_config(seed))
    streams = generate_streams(scenario, seed)
    out = cfg.ensure_directories(Path(args.out))

    write_trajectory_csv(out / "ground_truth.csv", streams.gt.t_us, streams.gt.poses)
    write_odometry_csv(out / "odometry.csv", streams.odometry)
    write_rtt_csv(out / "rtt.csv", streams.ranges)
    print_yaml(
        "simulation",
        {
            "scenario": scenario.config.name,
            "seed": seed,
            "duration_s": streams.gt.duration_us / 1e6,
            "path_length_m": round(streams.gt.path_length, 6),
            "odometry_samples": len(streams.odometry),
            "rtt_samples": len(streams.ranges),
            "output_dir": str(out),
        },
    )
    return 0


async def _robot(args) -> int:
    cfg = load_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    session = make_session(cfg, seed, args.closed_loop)
    host, port = parse_address(args.connect)
    transport = await TcpTransport.connect(host, port)
    try:
        stats = await run_robot(session, transport)
    except RobotSessionAborted as e:
        app_logger.error(f"Robot session aborted: {e}")
        print_yaml("robot_session", e.stats.model_dump() if e.stats else {"error": str(e)})
        return 1
    finally:
        await transport.shutdown()
    print_yaml("robot_session", stats.model_dump())
    return 0


async def _edge(args) -> int:
    cfg = load_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    controller = make_controller(cfg, seed)
    out = cfg.ensure_directories(Path(args.out) if args.out else None)
    host, port = parse_address(args.listen)
    transport = await accept_one(host, port)
    try:
        summary = await run_edge(controller, transport, out_dir=out)
    finally:
        await transport.shutdown()
    print_yaml("edge_session", summary.model_dump())
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    experiment = cfg.experiment(output_dir=args.out)
    cfg.ensure_directories(Path(experiment.output_dir))
    report = run_experiment(experiment)
    print((Path(experiment.output_dir) / "summary.txt").read_text(), end="")
    return 1 if report.failures and not report.reports else 0


async def _run(args) -> int:
    """Robot and edge in one process, over loopback queues or localhost TCP"""
    cfg = load_config(args)
    seed = cfg.seed if args.seed is None else args.seed
    session = make_session(cfg, seed, args.closed_loop)
    controller = make_controller(cfg, seed)
    out = cfg.ensure_directories(Path(args.out) if args.out else None)

    if args.mode == "loopback":
        robot_end, edge_end = LoopbackTransport.pair()
        server = None
    else:
        host, port = parse_address(args.listen or f"{settings.listen_host}:0")
        server, connected = await listen(host, port)
        robot_end = await TcpTransport.connect(host, bound_port(server))
        edge_end = await connected
        server.close()

    edge_task = asyncio.create_task(run_edge(controller, edge_end, out_dir=out))
    exit_code = 0
    try:
        stats = await run_robot(session, robot_end)
    except RobotSessionAborted as e:
        app_logger.error(f"Robot session aborted: {e}")
        stats = e.stats
        exit_code = 1
        await robot_end.close()
    summary = await edge_task
    if server is not None:
        await robot_end.shutdown()
        await edge_end.shutdown()

    # Ground truth is the scripted path (open loop) or the unicycle's own trajectory
    gt_t, gt_poses = split_trajectory([(0, session.scenario.start_pose)] + session.trajectory)
    write_trajectory_csv(out / "trajectory_gt.csv", gt_t, gt_poses)
    est_t, est_poses = split_trajectory(controller.estimator.trajectory())
    result = {"robot_session": stats.model_dump() if stats else None, "edge_session": summary.model_dump()}
    if len(est_t):
        path_length = float(np.sum(np.hypot(*np.diff(gt_poses[:, :2], axis=0).T)))
        report = build_report("edge", seed, est_t, est_poses, gt_t, gt_poses, path_length)
        write_records_csv(
            out / "metrics.csv",
            [{"method": "edge", "seed": seed, "rmse": report.rmse, "p90": report.p90, "endpoint": report.endpoint}],
            ["method", "seed", "rmse", "p90", "endpoint"],
        )
        write_overlay(
            out / "overlay.svg",
            {"gt": gt_poses, "edge": est_poses},
            title=f"{args.mode} seed {seed}",
            aps=session.scenario.config.aps,
        )
        result["metrics"] = {"rmse": report.rmse, "p90": report.p90, "endpoint": report.endpoint}
    print(yaml.safe_dump(result, sort_keys=False), end="", flush=True)
    return exit_code


def main(argv=None) -> int:
    args = parse_args(argv)
    app_logger.debug(f"edgebot {args.command}")
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "eval":
            return cmd_eval(args)
        runner = {"robot": _robot, "edge": _edge, "run": _run}[args.command]
        return asyncio.run(runner(args))
    except (EdgebotError, FileNotFoundError, ValueError) as e:
        app_logger.error(f"{args.command} failed: {e}")
        return 2
    except KeyboardInterrupt:
        app_logger.info("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
