"""
Edge controller: the offloaded control system

An ingestion task decodes frames and feeds a bounded queue; the control task
owns the estimator, turns frame timestamps into scheduler actions and sends
commands back to the robot.
"""
import asyncio
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import yaml
from apscheduler.schedulers.asyncio import AsyncIOScheduler
from apscheduler.triggers.interval import IntervalTrigger

from edgebot.core.config import settings
from edgebot.core.errors import DuplicateFrame, PlannerError, ProtocolError, SolverDiverged, TransportError
from edgebot.core.logging import component_logger
from edgebot.models.frames import CommandPayload, Frame, FrameKind, ImuBatch
from edgebot.models.geometry import Pose2, Timestamp, wrap_angle
from edgebot.models.schemas import (
    DetectorConfig,
    EdgeSummary,
    KeyframeModel,
    PlannerGains,
    SchedulerConfig,
    SolverConfig,
    SolveStats,
)
from edgebot.services.estimator import Estimator
from edgebot.services.optimizer import optimize
from edgebot.services.protocol import decode_frame, encode_frame
from edgebot.services.simulator import Scenario
from edgebot.services.transport import Transport
from edgebot.utils.trajectory_io import split_trajectory, write_records_csv, write_trajectory_csv

logger = component_logger("edge")

Waypoint = Tuple[float, float]


# ---------------------------------------------------------------------------
# Ingest
# ---------------------------------------------------------------------------

class IngestQueue:
    """Bounded queue of decoded frames with duplicate and gap accounting"""

    def __init__(self, maxsize: int = 1024):
        self.queue: asyncio.Queue = asyncio.Queue(maxsize=maxsize)
        self.last_seq: Optional[int] = None
        self.duplicates = 0
        self.seq_gaps = 0
        self.missing_frames = 0

    def admit(self, frame: Frame) -> None:
        """
        Advance the sequence tracker

        Raises:
            DuplicateFrame: seq did not increase (the frame is counted and must be dropped)
        """
        if self.last_seq is not None:
            if frame.seq <= self.last_seq:
                self.duplicates += 1
                raise DuplicateFrame(frame.kind.name, frame.seq, self.last_seq)
            missing = frame.seq - self.last_seq - 1
            if missing:
                self.seq_gaps += 1
                self.missing_frames += missing
        self.last_seq = frame.seq

    async def put(self, frame: Frame) -> bool:
        try:
            self.admit(frame)
        except DuplicateFrame as e:
            logger.warning(f"Dropped {e}")
            return False
        await self.queue.put(frame)
        return True

    async def get(self) -> Optional[Frame]:
        return await self.queue.get()

    async def close(self) -> None:
        await self.queue.put(None)


# ---------------------------------------------------------------------------
# Scheduling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MakeKeyframe:
    epoch_us: Timestamp


@dataclass(frozen=True)
class RunSolver:
    t_us: Timestamp


@dataclass(frozen=True)
class PlanCommand:
    t_us: Timestamp


Action = Union[MakeKeyframe, RunSolver, PlanCommand]


class ControlScheduler:
    """Turns a monotone clock into keyframe, solver and command actions"""

    def __init__(self, cfg: SchedulerConfig, epoch_period_us: int):
        self.cfg = cfg
        self.epoch_period_us = epoch_period_us
        self.command_period_us = cfg.command_period_ms * 1000
        self.next_epoch_us: Timestamp = epoch_period_us
        self.next_command_us: Timestamp = self.command_period_us
        self.keyframes_since_solve = 0
        self.now_us: Timestamp = 0

    def schedule_tick(self, now: Timestamp) -> List[Action]:
        """All actions whose boundary is at or before `now`, in time order"""
        if now < self.now_us:
            raise ValueError(f"scheduler clock went backwards ({now} < {self.now_us})")
        self.now_us = now
        actions: List[Action] = []
        while min(self.next_epoch_us, self.next_command_us) <= now:
            if self.next_epoch_us <= self.next_command_us:
                t = self.next_epoch_us
                if self.cfg.keyframe_on_rtt_epoch:
                    actions.append(MakeKeyframe(t))
                    self.keyframes_since_solve += 1
                    if self.keyframes_since_solve >= self.cfg.solve_every_k:
                        actions.append(RunSolver(t))
                        self.keyframes_since_solve = 0
                self.next_epoch_us += self.epoch_period_us
            else:
                actions.append(PlanCommand(self.next_command_us))
                self.next_command_us += self.command_period_us
        return actions


# ---------------------------------------------------------------------------
# Planning
# ---------------------------------------------------------------------------

@dataclass
class EstimateState:
    pose: Pose2 = field(default_factory=Pose2.identity)
    keyframe_count: int = 0
    last_solve_stats: Optional[SolveStats] = None


def plan_command(
    est: EstimateState,
    waypoints: Sequence[Waypoint],
    gains: Optional[PlannerGains] = None,
    duration_ms: int = 500,
) -> Tuple[CommandPayload, List[Waypoint]]:
    """
    Proportional unicycle law toward the next waypoint

    Returns:
        The command and the remaining waypoints (the first is popped once
        the robot is inside the capture radius)

    Raises:
        PlannerError: no waypoints left
    """
    gains = gains or PlannerGains()
    remaining = list(waypoints)
    if not remaining:
        raise PlannerError("no waypoints left to plan toward")

    tx, ty = remaining[0]
    dx, dy = tx - est.pose.x, ty - est.pose.y
    distance = math.hypot(dx, dy)
    if distance <= gains.capture_radius:
        return CommandPayload.from_real(0.0, 0.0, duration_ms), remaining[1:]

    error = wrap_angle(math.atan2(dy, dx) - est.pose.theta)
    omega = max(-gains.omega_max, min(gains.omega_max, gains.k_omega * error))
    v = 0.0 if abs(error) >= math.pi / 2 else min(gains.v_max, max(0.0, gains.k_v * distance))
    return CommandPayload.from_real(v, omega, duration_ms), remaining


# ---------------------------------------------------------------------------
# Controller
# ---------------------------------------------------------------------------

class EdgeController:
    """Control-task state: scheduler, estimator, planner and session counters"""

    def __init__(
        self,
        scenario: Scenario,
        scheduler: Optional[SchedulerConfig] = None,
        planner: Optional[PlannerGains] = None,
        keyframes: Optional[KeyframeModel] = None,
        detector: Optional[DetectorConfig] = None,
        solver: Optional[SolverConfig] = None,
        waypoints: Optional[Sequence[Waypoint]] = None,
        solve_in_executor: bool = False,
    ):
        self.scenario = scenario
        self.scheduler_cfg = scheduler or SchedulerConfig()
        self.gains = planner or PlannerGains()
        self.scheduler = ControlScheduler(self.scheduler_cfg, scenario.epoch_period_us)
        self.estimator = Estimator(
            n_aps=scenario.n_aps,
            start_pose=scenario.start_pose,
            keyframes=keyframes,
            detector=detector,
            solver=solver,
        )
        self.waypoints: List[Waypoint] = list(
            waypoints if waypoints is not None else scenario.waypoints[1:]
        )
        self.solve_in_executor = solve_in_executor
        self.ingest_queue = IngestQueue()
        self.summary = EdgeSummary()
        self.solve_log: List[dict] = []
        self.outbox: List[Frame] = []
        self.now_us: Timestamp = 0
        self.last_heartbeat_us: Optional[Timestamp] = None
        self._seq = 0
        self._latencies: List[float] = []
        self._planner_done = False

    @property
    def state(self) -> EstimateState:
        return EstimateState(
            pose=self.estimator.latest_pose,
            keyframe_count=self.estimator.keyframe_count,
            last_solve_stats=self.estimator.last_stats,
        )

    # -- frame handling ----------------------------------------------------

    def ingest(self, frame: Frame) -> List[tuple]:
        """
        Route a frame into the estimator

        Returns:
            The internal events produced, e.g. ("odometry", t, dd, dtheta)
        """
        events: List[tuple] = []
        self.summary.frames_received += 1
        p = frame.payload
        if frame.kind is FrameKind.IMU_BATCH:
            events.extend(self._unpack_imu(frame.timestamp_us, p))
        elif frame.kind is FrameKind.RTT:
            self.estimator.add_range(frame.timestamp_us, p.ap_id, p.range)
            self.summary.ranges += 1
            events.append(("range", frame.timestamp_us, p.ap_id, p.range))
        elif frame.kind is FrameKind.HEARTBEAT:
            self.last_heartbeat_us = frame.timestamp_us
            self.summary.heartbeats += 1
            events.append(("heartbeat", frame.timestamp_us))
        else:
            logger.warning(f"Edge ignoring unexpected {frame.kind.name} frame seq={frame.seq}")
        return events

    def _unpack_imu(self, batch_t: Timestamp, batch: ImuBatch) -> List[tuple]:
        # Batch timestamp is the last sample; dt_us chains back from it
        times = []
        t = batch_t
        for s in reversed(batch.samples):
            times.append(t)
            t -= s.dt_us
        times.reverse()
        events = []
        for t, s in zip(times, batch.samples):
            self.estimator.add_odometry(t, s.dd, s.dtheta, s.dt_us)
            events.append(("odometry", t, s.dd, s.dtheta))
        self.summary.odometry_samples += len(batch.samples)
        return events

    def receive(self, frame: Frame) -> List[Action]:
        """Synchronous path: admit, run due actions, then ingest"""
        try:
            self.ingest_queue.admit(frame)
        except DuplicateFrame as e:
            logger.warning(f"Dropped {e}")
            return []
        return self.process(frame)

    def process(self, frame: Frame) -> List[Action]:
        started = time.perf_counter()
        actions: List[Action] = []
        if frame.timestamp_us > self.now_us:
            # boundaries strictly before this frame are complete
            actions = self.scheduler.schedule_tick(frame.timestamp_us - 1)
            self.now_us = frame.timestamp_us
            for action in actions:
                self.execute(action)
        self.ingest(frame)
        self._latencies.append((time.perf_counter() - started) * 1000.0)
        return actions

    def execute(self, action: Action) -> None:
        if isinstance(action, MakeKeyframe):
            self.estimator.make_keyframe(action.epoch_us)
            self.summary.keyframes = self.estimator.keyframe_count
        elif isinstance(action, RunSolver):
            self.run_solver(action.t_us)
        elif isinstance(action, PlanCommand):
            self.plan(action.t_us)

    def finalize(self) -> None:
        """Close epochs up to the last frame time and run a last solve"""
        for action in self.scheduler.schedule_tick(self.now_us):
            if not isinstance(action, PlanCommand):
                self.execute(action)
        if self.scheduler.keyframes_since_solve and self.estimator.keyframe_count > 1:
            self.run_solver(self.now_us)
            self.scheduler.keyframes_since_solve = 0

    # -- solver and planner ------------------------------------------------

    def run_solver(self, t_us: Timestamp) -> Optional[SolveStats]:
        if self.estimator.keyframe_count < 2:
            return None
        new_edges = self.estimator.detect_new_closures()
        try:
            stats = self.estimator.solve()
        except SolverDiverged as e:
            logger.warning(f"Solver diverged at t={t_us}us: {e}")
            stats = e.stats
        self._record_solve(t_us, len(new_edges), stats)
        return stats

    async def run_solver_async(self, t_us: Timestamp) -> Optional[SolveStats]:
        """Solve on a worker thread; the graph goes over by value"""
        if self.estimator.keyframe_count < 2:
            return None
        new_edges = self.estimator.detect_new_closures()
        graph = self.estimator.graph.copy()
        loop = asyncio.get_running_loop()
        try:
            solved, stats = await loop.run_in_executor(None, optimize, graph, self.estimator.solver)
            self.estimator.merge(solved, stats)
        except SolverDiverged as e:
            logger.warning(f"Solver diverged at t={t_us}us: {e}")
            stats = e.stats
        self._record_solve(t_us, len(new_edges), stats)
        return stats

    def _record_solve(self, t_us: Timestamp, new_edges: int, stats: Optional[SolveStats]) -> None:
        self.summary.solves += 1
        self.summary.loop_edges = len(self.estimator.graph.loop_edges)
        if stats is None:
            return
        self.summary.last_chi2 = stats.final_chi2
        weights = stats.weights
        self.solve_log.append(
            {
                "t_us": t_us,
                "keyframes": self.estimator.keyframe_count,
                "loop_edges": len(self.estimator.graph.loop_edges),
                "new_loop_edges": new_edges,
                "initial_chi2": stats.initial_chi2,
                "final_chi2": stats.final_chi2,
                "iterations": stats.iterations,
                "converged": stats.converged,
                "min_weight": min(weights) if weights else 1.0,
            }
        )

    def plan(self, t_us: Timestamp) -> Optional[Frame]:
        if self._planner_done:
            return None
        try:
            cmd, self.waypoints = plan_command(
                self.state, self.waypoints, self.gains, self.scheduler_cfg.command_period_ms
            )
        except PlannerError:
            logger.info(f"Route complete at t={t_us}us; sending stop")
            cmd = CommandPayload.from_real(0.0, 0.0, self.scheduler_cfg.command_period_ms)
            self._planner_done = True
        frame = Frame(seq=self._seq, timestamp_us=t_us, payload=cmd)
        self._seq += 1
        self.outbox.append(frame)
        return frame

    # -- reporting ---------------------------------------------------------

    def status_line(self) -> str:
        s = self.summary
        chi2 = f"{s.last_chi2:.3g}" if s.last_chi2 is not None else "-"
        return (
            f"[edge] t={self.now_us / 1e6:7.2f}s keyframes={self.estimator.keyframe_count} "
            f"loops={len(self.estimator.graph.loop_edges)} chi2={chi2} "
            f"dup={self.ingest_queue.duplicates} missing={self.ingest_queue.missing_frames}"
        )

    def finish_summary(self) -> EdgeSummary:
        s = self.summary
        s.duplicates = self.ingest_queue.duplicates
        s.seq_gaps = self.ingest_queue.seq_gaps
        s.missing_frames = self.ingest_queue.missing_frames
        s.keyframes = self.estimator.keyframe_count
        s.loop_edges = len(self.estimator.graph.loop_edges)
        s.imu_gap_us = self.estimator.imu_gap_us
        if self._latencies:
            s.latency_ms_mean = sum(self._latencies) / len(self._latencies)
            s.latency_ms_max = max(self._latencies)
        return s

    def write_outputs(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        t, poses = split_trajectory(self.estimator.trajectory())
        write_trajectory_csv(out_dir / "trajectory_edge.csv", t, poses)
        write_records_csv(
            out_dir / "solve_stats.csv",
            self.solve_log,
            ["t_us", "keyframes", "loop_edges", "new_loop_edges", "initial_chi2", "final_chi2",
             "iterations", "converged", "min_weight"],
        )
        with open(out_dir / "summary.yaml", "w") as f:
            yaml.safe_dump(self.finish_summary().model_dump(), f, sort_keys=False)
        logger.info(f"Edge outputs written to {out_dir}")
        return out_dir


# ---------------------------------------------------------------------------
# Tasks
# ---------------------------------------------------------------------------

async def _ingestion_task(transport: Transport, controller: EdgeController) -> None:
    queue = controller.ingest_queue
    try:
        while True:
            data = await transport.recv_frame()
            if data is None:
                break
            try:
                frame = decode_frame(data)
            except ProtocolError as e:
                controller.summary.decode_errors += 1
                logger.warning(f"Edge discarded undecodable frame: {e}")
                continue
            await queue.put(frame)
    finally:
        await queue.close()


async def _control_task(transport: Transport, controller: EdgeController) -> None:
    while True:
        frame = await controller.ingest_queue.get()
        if frame is None:
            break
        if controller.solve_in_executor:
            await _process_with_executor(controller, frame)
        else:
            controller.process(frame)
        await _flush_outbox(transport, controller)
    controller.finalize()


async def _process_with_executor(controller: EdgeController, frame: Frame) -> None:
    actions: List[Action] = []
    if frame.timestamp_us > controller.now_us:
        actions = controller.scheduler.schedule_tick(frame.timestamp_us - 1)
        controller.now_us = frame.timestamp_us
    for action in actions:
        if isinstance(action, RunSolver):
            await controller.run_solver_async(action.t_us)
        else:
            controller.execute(action)
    controller.ingest(frame)


async def _flush_outbox(transport: Transport, controller: EdgeController) -> None:
    while controller.outbox:
        frame = controller.outbox.pop(0)
        try:
            await transport.send_frame(encode_frame(frame))
            controller.summary.commands_sent += 1
        except TransportError as e:
            logger.warning(f"Command seq={frame.seq} not delivered: {e}")


async def run_edge(
    controller: EdgeController,
    transport: Transport,
    out_dir: Optional[Union[str, Path]] = None,
    status_line: Optional[bool] = None,
) -> EdgeSummary:
    """
    Serve one robot session until the robot closes its stream

    Returns:
        The session summary (also written to `out_dir` when given)
    """
    status_line = settings.enable_status_line if status_line is None else status_line
    scheduler: Optional[AsyncIOScheduler] = None
    if status_line:
        scheduler = AsyncIOScheduler()
        scheduler.add_job(
            func=lambda: print(controller.status_line(), flush=True),
            trigger=IntervalTrigger(seconds=settings.status_interval_s),
            id="edge_status",
            name="Edge status line",
            replace_existing=True,
        )
        scheduler.start()

    logger.info(f"Edge session started (scenario '{controller.scenario.config.name}')")
    try:
        await asyncio.gather(
            _ingestion_task(transport, controller),
            _control_task(transport, controller),
        )
    finally:
        if scheduler is not None:
            scheduler.shutdown(wait=False)

    summary = controller.finish_summary()
    if out_dir is not None:
        controller.write_outputs(out_dir)
    logger.info(
        f"Edge session finished: {summary.frames_received} frames, {summary.keyframes} keyframes, "
        f"{summary.loop_edges} loop edges, {summary.solves} solves, "
        f"{summary.missing_frames} missing frames"
    )
    return summary
