"""
Robot node: streams batched odometry and RTT frames to the edge

The node keeps no estimator state. It turns sensor samples into frames, holds
them in a bounded transmit buffer while the link is congested, and logs the
commands the edge sends back. In closed-loop mode those commands drive a
unicycle simulator that replaces the scripted ground truth.
"""
import asyncio
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, List, Literal, Optional, Sequence, Tuple

from edgebot.core.config import settings
from edgebot.core.errors import ProtocolError, RobotSessionAborted, TransportError
from edgebot.core.logging import component_logger
from edgebot.models.frames import (
    CommandPayload,
    Frame,
    FrameKind,
    HeartbeatPayload,
    ImuBatch,
    ImuSample,
    RttPayload,
)
from edgebot.models.geometry import MICROS_PER_SECOND, Pose2, Timestamp
from edgebot.models.schemas import RobotConfig, SessionStats
from edgebot.services.protocol import decode_frame, encode_frame
from edgebot.services.simulator import (
    OnlineSensors,
    RttSample,
    Scenario,
    SensorStreams,
    generate_streams,
    rtt_epochs,
)
from edgebot.services.transport import Transport

logger = component_logger("robot")

# Simulated time the node keeps draining its buffer after the streams end
DRAIN_LIMIT_US = 60 * MICROS_PER_SECOND

_STAT_NAMES = {
    FrameKind.IMU_BATCH: "imu",
    FrameKind.RTT: "rtt",
    FrameKind.HEARTBEAT: "heartbeat",
}


# ---------------------------------------------------------------------------
# Transmit buffer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DropDecision:
    action: Literal["enqueue", "drop"]
    evict: Optional[int] = None  # buffer index to evict before enqueueing


def drop_policy(queued: Sequence[FrameKind], new: FrameKind, capacity: Optional[int]) -> DropDecision:
    """
    Decide what happens to a new frame offered to the transmit buffer

    A non-full buffer always accepts. When full, the oldest queued ImuBatch is
    evicted to make room; a buffer holding no ImuBatch rejects the new frame.
    """
    if capacity is None or len(queued) < capacity:
        return DropDecision("enqueue")
    for index, kind in enumerate(queued):
        if kind is FrameKind.IMU_BATCH:
            return DropDecision("enqueue", evict=index)
    return DropDecision("drop")


class TxBuffer:
    """Bounded FIFO of encoded frames"""

    def __init__(self, capacity: Optional[int] = 64):
        self.capacity = capacity
        self._frames: Deque[Tuple[FrameKind, Timestamp, bytes]] = deque()

    def __len__(self) -> int:
        return len(self._frames)

    @property
    def kinds(self) -> List[FrameKind]:
        return [k for k, _, _ in self._frames]

    def offer(self, kind: FrameKind, t: Timestamp, data: bytes) -> Optional[FrameKind]:
        """
        Add a frame under the drop policy

        Returns:
            The kind of the frame that was lost (evicted or rejected), or None
        """
        decision = drop_policy(self.kinds, kind, self.capacity)
        if decision.action == "drop":
            return kind
        lost = None
        if decision.evict is not None:
            lost = self._frames[decision.evict][0]
            del self._frames[decision.evict]
        self._frames.append((kind, t, data))
        return lost

    def peek(self) -> Tuple[FrameKind, Timestamp, bytes]:
        return self._frames[0]

    def pop(self) -> Tuple[FrameKind, Timestamp, bytes]:
        return self._frames.popleft()


# ---------------------------------------------------------------------------
# Commands and closed-loop kinematics
# ---------------------------------------------------------------------------

@dataclass
class CommandLog:
    entries: List[Tuple[Timestamp, CommandPayload]] = field(default_factory=list)

    def append(self, t: Timestamp, cmd: CommandPayload) -> None:
        if self.entries and t < self.entries[-1][0]:
            raise ValueError(f"command log timestamps must not decrease ({t} < {self.entries[-1][0]})")
        self.entries.append((t, cmd))

    def __len__(self) -> int:
        return len(self.entries)


class UnicycleSimulator:
    """
    Unicycle kinematics integrated at the IMU rate; the commanded velocity
    holds until its duration expires, then the robot halts
    """

    def __init__(self, pose: Pose2):
        self.pose = pose
        self.v = 0.0
        self.omega = 0.0
        self.until_us: Timestamp = 0

    def set_velocity(self, v: float, omega: float, now_us: Timestamp, duration_ms: int) -> None:
        self.v = v
        self.omega = omega
        self.until_us = now_us + duration_ms * 1000

    def step(self, now_us: Timestamp, dt_us: int) -> Tuple[float, float]:
        """
        Advance from now_us by dt_us

        Returns:
            True body-frame increments (dd, dtheta) for the tick
        """
        active_us = max(0, min(dt_us, self.until_us - now_us))
        dt = active_us / MICROS_PER_SECOND
        dd = self.v * dt
        dtheta = self.omega * dt
        mid = self.pose.theta + dtheta / 2.0
        self.pose = Pose2(
            self.pose.x + dd * math.cos(mid),
            self.pose.y + dd * math.sin(mid),
            self.pose.theta + dtheta,
        )
        return dd, dtheta


def apply_command(
    cmd: CommandPayload,
    t: Timestamp,
    log: CommandLog,
    sim: Optional[UnicycleSimulator] = None,
) -> CommandLog:
    """Log a received command; in closed-loop mode the simulator follows it"""
    log.append(t, cmd)
    if sim is not None:
        sim.set_velocity(cmd.v, cmd.omega, t, cmd.duration_ms)
    return log


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------

class RobotSession:
    """One robot run: frame generation, transmit buffering and command intake"""

    def __init__(
        self,
        scenario: Scenario,
        config: Optional[RobotConfig] = None,
        streams: Optional[SensorStreams] = None,
        seed: Optional[int] = None,
    ):
        self.scenario = scenario
        self.config = config or RobotConfig()
        self.seed = scenario.config.seed if seed is None else seed
        self.streams = streams
        self.tx = TxBuffer(self.config.tx_capacity)
        self.stats = SessionStats()
        self.command_log = CommandLog()
        self.unicycle: Optional[UnicycleSimulator] = (
            UnicycleSimulator(scenario.start_pose) if self.config.closed_loop else None
        )
        self.trajectory: List[Tuple[Timestamp, Pose2]] = []
        self.now_us: Timestamp = 0
        self._seq = 0
        self._pending: List[ImuSample] = []
        self._last_imu_t: Timestamp = 0
        self._next_heartbeat_us: Timestamp = self.config.heartbeat_period_ms * 1000

    # -- frame generation ------------------------------------------------

    def _count(self, prefix: str, kind: FrameKind, n: int = 1) -> None:
        name = f"{prefix}_{_STAT_NAMES[kind]}"
        setattr(self.stats, name, getattr(self.stats, name) + n)

    def _emit(self, t: Timestamp, payload) -> None:
        frame = Frame(seq=self._seq, timestamp_us=t, payload=payload)
        self._seq += 1
        self._count("generated", frame.kind)
        lost = self.tx.offer(frame.kind, t, encode_frame(frame))
        if lost is not None:
            self._count("dropped", lost)
            logger.debug(f"tx buffer full at t={t}us: dropped a {lost.name} frame")

    def add_odometry(self, t: Timestamp, dd: float, dtheta: float) -> None:
        self._pending.append(ImuSample.from_real(t - self._last_imu_t, dd, dtheta))
        self._last_imu_t = t
        if len(self._pending) >= self.config.imu_batch:
            self.flush_imu(t)

    def flush_imu(self, t: Timestamp) -> None:
        if self._pending:
            self._emit(t, ImuBatch(tuple(self._pending)))
            self._pending = []

    def add_ranges(self, t: Timestamp, ranges: Sequence[RttSample]) -> None:
        """Close the IMU batch at the epoch, then queue one frame per range"""
        self.flush_imu(t)
        for r in ranges:
            self._emit(t, RttPayload.from_real(r.ap_id, r.range))

    def maybe_heartbeat(self, t: Timestamp) -> None:
        while t >= self._next_heartbeat_us:
            self._emit(t, HeartbeatPayload())
            self._next_heartbeat_us += self.config.heartbeat_period_ms * 1000

    # -- link ------------------------------------------------------------

    async def pump(self, transport: Transport, now_us: Timestamp) -> None:
        """Send what the link accepts, then take in any commands"""
        self.now_us = now_us
        while len(self.tx) and transport.can_send(now_us):
            kind, _, data = self.tx.peek()
            try:
                await transport.send_frame(data)
            except TransportError as e:
                self._abort(e)
            self.tx.pop()
            self._count("sent", kind)

        while True:
            data = transport.recv_frame_nowait()
            if data is None:
                break
            try:
                frame = decode_frame(data)
            except ProtocolError as e:
                logger.warning(f"Robot discarded undecodable frame: {e}")
                continue
            if frame.kind is FrameKind.COMMAND:
                apply_command(frame.payload, now_us, self.command_log, self.unicycle)
                self.stats.commands_received += 1

    def _abort(self, error: Exception) -> None:
        self.stats.aborted = True
        self.stats.error = str(error)
        self.stats.duration_us = self.now_us
        logger.error(f"Robot session aborted at t={self.now_us}us: {error}")
        raise RobotSessionAborted(f"robot session aborted: {error}", self.stats) from error

    async def _tick(self, transport: Transport, t: Timestamp) -> None:
        self.maybe_heartbeat(t)
        await self.pump(transport, t)
        if settings.time_scale > 0:
            await asyncio.sleep(self.scenario.period_us / MICROS_PER_SECOND * settings.time_scale)
        else:
            await asyncio.sleep(0)

    # -- runs --------------------------------------------------------------

    async def run_open_loop(self, transport: Transport) -> None:
        if self.streams is None:
            self.streams = generate_streams(self.scenario, self.seed)
        gt = self.streams.gt
        by_epoch = rtt_epochs(self.streams.ranges)
        tpe = self.scenario.ticks_per_epoch

        for k, od in enumerate(self.streams.odometry, start=1):
            t = od.t
            self.trajectory.append((t, gt.pose(k)))
            self.add_odometry(t, od.dd, od.dtheta)
            if k % tpe == 0:
                self.add_ranges(t, by_epoch.get(t, []))
            await self._tick(transport, t)

        self.now_us = int(gt.t_us[-1]) if len(gt) else 0

    async def run_closed_loop(self, transport: Transport) -> None:
        sensors = OnlineSensors(self.scenario, self.seed)
        period = self.scenario.period_us
        tpe = self.scenario.ticks_per_epoch
        duration_s = self.config.closed_loop_duration_s
        if duration_s is None:
            streams = self.streams or generate_streams(self.scenario, self.seed)
            duration_us = streams.gt.duration_us
        else:
            duration_us = int(duration_s * MICROS_PER_SECOND)

        n_ticks = duration_us // period
        for k in range(1, n_ticks + 1):
            t = k * period
            dd, dtheta = self.unicycle.step(t - period, period)
            self.trajectory.append((t, self.unicycle.pose))
            od = sensors.odometry(t, dd, dtheta, period / MICROS_PER_SECOND)
            self.add_odometry(t, od.dd, od.dtheta)
            if k % tpe == 0:
                p = self.unicycle.pose
                self.add_ranges(t, sensors.ranges(t, p.x, p.y))
            await self._tick(transport, t)

        self.now_us = n_ticks * period

    async def finish(self, transport: Transport) -> None:
        """Flush the last batch, send the final heartbeat and drain the buffer"""
        t = self.now_us
        self.flush_imu(t)
        self._emit(t, HeartbeatPayload())

        deadline = t + DRAIN_LIMIT_US
        while True:
            await self.pump(transport, t)
            if not len(self.tx):
                break
            if t >= deadline:
                self._abort(TransportError(f"{len(self.tx)} frames still queued after drain limit"))
            t += self.scenario.period_us
            await asyncio.sleep(0)

        self.stats.duration_us = t
        await transport.close()


async def run_robot(session: RobotSession, transport: Transport) -> SessionStats:
    """
    Run a robot session to completion over `transport`

    Raises:
        RobotSessionAborted: the transport failed; carries the partial stats
    """
    mode = "closed-loop" if session.config.closed_loop else "open-loop"
    logger.info(
        f"Robot session started ({mode}, scenario '{session.scenario.config.name}', seed {session.seed})"
    )
    if session.config.closed_loop:
        await session.run_closed_loop(transport)
    else:
        await session.run_open_loop(transport)
    await session.finish(transport)

    s = session.stats
    logger.info(
        f"Robot session finished: sent {s.sent} frames "
        f"(imu {s.sent_imu}, rtt {s.sent_rtt}, heartbeat {s.sent_heartbeat}), "
        f"dropped imu {s.dropped_imu} / rtt {s.dropped_rtt}, commands {s.commands_received}"
    )
    return s
