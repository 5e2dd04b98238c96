"""
Seeds x methods comparison: PDR only, traditional pose graph, robust pose graph

Every method for a seed works on the same simulated streams and the same
pose graph; only the solver configuration differs.
"""
import multiprocessing
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from edgebot.core.logging import app_logger
from edgebot.models.schemas import (
    DetectorConfig,
    ExperimentConfig,
    ExperimentReport,
    FalsePositiveConfig,
    KeyframeModel,
    MetricsReport,
    SolverConfig,
)
from edgebot.services.estimator import Estimator
from edgebot.services.evaluation import build_report, enhancement_ratio, interpolate_positions
from edgebot.services.optimizer import optimize
from edgebot.services.pose_graph import LoopEdge, PoseGraph
from edgebot.services.simulator import (
    Scenario,
    SensorStreams,
    build_scenario,
    epoch_indices,
    generate_streams,
    rtt_epochs,
)
from edgebot.utils.svg_plot import write_overlay
from edgebot.utils.trajectory_io import (
    split_trajectory,
    write_frame,
    write_records_csv,
    write_trajectory_csv,
)

_INJECT_STREAM = 3


def run_pipeline(
    scenario: Scenario,
    streams: SensorStreams,
    keyframes: Optional[KeyframeModel] = None,
    detector: Optional[DetectorConfig] = None,
    solver: Optional[SolverConfig] = None,
) -> Estimator:
    """
    Replay sensor streams through the estimator offline: keyframe at every
    RTT epoch, then detect closures over the whole run
    """
    est = Estimator(
        n_aps=scenario.n_aps,
        start_pose=scenario.start_pose,
        keyframes=keyframes,
        detector=detector,
        solver=solver,
    )
    by_epoch = rtt_epochs(streams.ranges)
    period = scenario.period_us
    epochs = epoch_indices(streams.gt, scenario)

    odometry = streams.odometry
    k = 0
    for idx in epochs:
        epoch_t = int(streams.gt.t_us[idx])
        while k < len(odometry) and odometry[k].t <= epoch_t:
            od = odometry[k]
            est.add_odometry(od.t, od.dd, od.dtheta, period)
            k += 1
        for r in by_epoch.get(epoch_t, []):
            est.add_range(r.t, r.ap_id, r.range)
        est.make_keyframe(epoch_t)

    est.detect_new_closures()
    return est


def inject_false_positives(
    graph: PoseGraph,
    truth_xy: np.ndarray,
    cfg: FalsePositiveConfig,
    rng: np.random.Generator,
    sigma_lc: float = 0.5,
    phi: float = 1.0,
    min_separation: int = 50,
) -> List[LoopEdge]:
    """
    Link every keyframe visiting one place to every keyframe visiting a
    distant place, as a fingerprint front end confusing two locations would

    Args:
        truth_xy: ground-truth keyframe positions, one row per node
    """
    n = len(graph.nodes)
    injected: List[LoopEdge] = []
    if n < 2 or cfg.count == 0:
        return injected
    existing = {(e.i, e.j) for e in graph.loop_edges}

    for cluster in range(cfg.count):
        a = b = None
        for _ in range(200):
            a_, b_ = rng.integers(0, n, size=2)
            if np.hypot(*(truth_xy[a_] - truth_xy[b_])) >= cfg.min_offset:
                a, b = int(a_), int(b_)
                break
        if a is None:
            app_logger.warning(f"No place pair {cfg.min_offset} m apart found for false cluster {cluster}")
            continue

        near_a = np.flatnonzero(np.hypot(*(truth_xy - truth_xy[a]).T) <= cfg.visit_radius)
        near_b = np.flatnonzero(np.hypot(*(truth_xy - truth_xy[b]).T) <= cfg.visit_radius)
        pairs = sorted(
            {
                (min(i, j), max(i, j))
                for i in near_a.tolist()
                for j in near_b.tolist()
                if abs(i - j) >= min_separation
            }
            - existing
        )
        if len(pairs) > cfg.max_edges_per_cluster:
            pick = np.sort(rng.choice(len(pairs), size=cfg.max_edges_per_cluster, replace=False))
            pairs = [pairs[p] for p in pick]
        for i, j in pairs:
            edge = LoopEdge(i, j, sigma_lc=sigma_lc, phi=phi, source="injected")
            graph.add_loop_edge(edge)
            injected.append(edge)
            existing.add((i, j))
    app_logger.debug(f"Injected {len(injected)} false loop closures in {cfg.count} clusters")
    return injected


@dataclass
class SeedResult:
    seed: int
    gt_t: np.ndarray
    gt_poses: np.ndarray
    trajectories: Dict[str, np.ndarray] = field(default_factory=dict)
    timestamps: Optional[np.ndarray] = None
    reports: List[MetricsReport] = field(default_factory=list)
    failures: List[str] = field(default_factory=list)


def run_seed(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """Simulate one seed and evaluate every requested method on it"""
    scenario = build_scenario(cfg.scenario.model_copy(update={"seed": seed}))
    streams = generate_streams(scenario, seed)
    gt = streams.gt
    result = SeedResult(seed=seed, gt_t=gt.t_us, gt_poses=gt.poses)

    est = run_pipeline(scenario, streams, cfg.keyframes, cfg.detector, cfg.solver)
    graph = est.graph
    t_kf = graph.timestamps()
    result.timestamps = t_kf
    truth_xy = interpolate_positions(gt.t_us, gt.poses[:, :2], t_kf)
    injected = inject_false_positives(
        graph,
        truth_xy,
        cfg.false_positives,
        np.random.default_rng((seed, _INJECT_STREAM)),
        sigma_lc=cfg.detector.sigma_lc,
        phi=cfg.solver.phi,
        min_separation=cfg.detector.min_separation,
    )
    injected_idx = [k for k, e in enumerate(graph.loop_edges) if e.source == "injected"]

    for method in cfg.methods:
        try:
            solve = None
            weight_mean = None
            if method == "pdr":
                _, poses = split_trajectory(est.pdr_trajectory())
            else:
                solver = cfg.solver.model_copy(update={"robust": method == "robust"})
                solved, solve = optimize(graph, solver)
                poses = solved.poses_array()
                if injected_idx:
                    weight_mean = float(np.mean([solve.weights[k] for k in injected_idx]))
            result.trajectories[method] = poses
            result.reports.append(
                build_report(
                    method,
                    seed,
                    t_kf,
                    poses,
                    gt.t_us,
                    gt.poses,
                    gt.path_length,
                    solve=solve,
                    loop_edges=len(graph.loop_edges),
                    injected_edges=len(injected),
                    injected_weight_mean=weight_mean,
                )
            )
        except Exception as e:
            app_logger.exception(f"seed {seed} method {method} failed: {e}")
            result.failures.append(f"seed {seed} method {method}: {type(e).__name__}: {e}")
    return result


def aggregate(reports: Sequence[MetricsReport], methods: Sequence[str]) -> Dict[str, Dict[str, float]]:
    out: Dict[str, Dict[str, float]] = {}
    for method in methods:
        rows = [r for r in reports if r.method == method]
        if not rows:
            continue
        stats: Dict[str, float] = {"runs": float(len(rows))}
        for metric in ("rmse", "p90", "endpoint"):
            values = np.array([getattr(r, metric) for r in rows])
            stats[f"{metric}_median"] = float(np.median(values))
            stats[f"{metric}_mean"] = float(np.mean(values))
        out[method] = stats
    return out


def format_summary(report: ExperimentReport) -> str:
    lines = [f"scenario: {report.scenario}", ""]
    lines.append(f"{'method':<12} {'runs':>4} {'rmse_med':>10} {'rmse_mean':>10} {'p90_med':>10} {'end_med':>10}")
    for method, s in report.aggregates.items():
        lines.append(
            f"{method:<12} {int(s['runs']):>4} {s['rmse_median']:>10.4f} {s['rmse_mean']:>10.4f} "
            f"{s['p90_median']:>10.4f} {s['endpoint_median']:>10.4f}"
        )
    robust = report.aggregates.get("robust")
    if robust:
        lines.append("")
        lines.append("enhancement (baseline - robust) / robust, medians:")
        for baseline in ("pdr", "traditional"):
            b = report.aggregates.get(baseline)
            if b:
                lines.append(
                    f"  vs {baseline:<12} rmse {enhancement_ratio(b['rmse_median'], robust['rmse_median']):.2%}"
                    f"  p90 {enhancement_ratio(b['p90_median'], robust['p90_median']):.2%}"
                )
    injected = [r.injected_weight_mean for r in report.reports if r.method == "robust" and r.injected_weight_mean is not None]
    if injected:
        lines.append(f"\nmean robust weight of injected false closures: {np.mean(injected):.4f}")
    if report.failures:
        lines.append("\nfailures:")
        lines.extend(f"  {f}" for f in report.failures)
    return "\n".join(lines) + "\n"


def write_seed_outputs(result: SeedResult, out_dir: Path, scenario_aps) -> None:
    seed_dir = out_dir / f"seed_{result.seed}"
    write_trajectory_csv(seed_dir / "trajectory_gt.csv", result.gt_t, result.gt_poses)
    for method, poses in result.trajectories.items():
        write_trajectory_csv(seed_dir / f"trajectory_{method}.csv", result.timestamps, poses)
    for r in result.reports:
        write_frame(pd.DataFrame(r.cdf, columns=["error", "fraction"]), seed_dir / f"cdf_{r.method}.csv")
    series = {"gt": result.gt_poses}
    series.update(result.trajectories)
    write_overlay(seed_dir / "overlay.svg", series, title=f"seed {result.seed}", aps=scenario_aps)


def _seed_outcomes(cfg: ExperimentConfig) -> Iterator[Tuple[int, Union[SeedResult, Exception]]]:
    """
    (seed, SeedResult or the exception it raised) in `cfg.seeds` order

    Seeds run in `cfg.workers` processes (0 means one per CPU); a single
    worker keeps everything in this process.
    """
    workers = min(cfg.workers or multiprocessing.cpu_count(), len(cfg.seeds))
    progress = dict(desc="seeds", unit="seed", total=len(cfg.seeds), disable=not sys.stderr.isatty())

    if workers <= 1:
        for seed in tqdm(cfg.seeds, **progress):
            try:
                yield seed, run_seed(cfg, seed)
            except Exception as e:
                yield seed, e
        return

    app_logger.debug(f"Running {len(cfg.seeds)} seeds in {workers} processes")
    with multiprocessing.Pool(processes=workers) as pool:
        jobs = [(seed, pool.apply_async(run_seed, (cfg, seed))) for seed in cfg.seeds]
        for seed, job in tqdm(jobs, **progress):
            try:
                yield seed, job.get()
            except Exception as e:
                yield seed, e


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """
    Run every seed x method, aggregate, and write the report files

    A failing stage is recorded in `failures` and the remaining runs continue.
    Reports keep seed order whatever the number of workers.
    """
    out_dir = Path(cfg.output_dir)
    report = ExperimentReport(scenario=cfg.scenario.name, output_dir=str(out_dir) if write else None)
    app_logger.info(
        f"Experiment '{cfg.scenario.name}': seeds {cfg.seeds}, methods {list(cfg.methods)}"
    )

    for seed, outcome in _seed_outcomes(cfg):
        if isinstance(outcome, Exception):
            app_logger.opt(exception=outcome).error(f"seed {seed} failed: {outcome}")
            report.failures.append(f"seed {seed}: {type(outcome).__name__}: {outcome}")
            continue
        report.reports.extend(outcome.reports)
        report.failures.extend(outcome.failures)
        if write:
            write_seed_outputs(outcome, out_dir, cfg.scenario.aps)

    report.aggregates = aggregate(report.reports, cfg.methods)
    if write:
        rows = [
            {"method": r.method, "seed": r.seed, "rmse": r.rmse, "p90": r.p90, "endpoint": r.endpoint}
            for r in report.reports
        ]
        write_records_csv(out_dir / "metrics.csv", rows, ["method", "seed", "rmse", "p90", "endpoint"])
        (out_dir / "summary.txt").write_text(format_summary(report))
        app_logger.info(f"Experiment outputs written to {out_dir}")
    if report.failures:
        app_logger.warning(f"Experiment finished with {len(report.failures)} failures")
    return report
