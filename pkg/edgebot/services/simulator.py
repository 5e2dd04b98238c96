"""
Simulated world: ground-truth trajectories and noisy odometry / RTT streams

Everything here is a pure function of (scenario, seed), so sensor streams can be
generated ahead of time for evaluation or tick-by-tick for closed-loop runs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from edgebot.core.errors import ScenarioError
from edgebot.core.logging import app_logger
from edgebot.models.geometry import MICROS_PER_SECOND, Pose2, Timestamp, wrap_angle
from edgebot.models.schemas import ImuNoiseModel, RttNoiseModel, ScenarioConfig

# Independent random streams derived from one seed
_IMU_STREAM = 1
_RTT_STREAM = 2


@dataclass(frozen=True, slots=True)
class OdometrySample:
    """Body-frame increment for one IMU tick"""
    t: Timestamp
    dd: float
    dtheta: float


@dataclass(frozen=True, slots=True)
class RttSample:
    t: Timestamp
    ap_id: int
    range: float


@dataclass(frozen=True)
class Scenario:
    """Validated scenario with derived timing constants"""
    config: ScenarioConfig
    aps: np.ndarray
    period_us: int
    ticks_per_epoch: int
    start_pose: Pose2

    @property
    def epoch_period_us(self) -> int:
        return self.period_us * self.ticks_per_epoch

    @property
    def n_aps(self) -> int:
        return int(self.aps.shape[0])

    @property
    def waypoints(self) -> List[tuple]:
        return [tuple(w) for w in self.config.waypoints]


@dataclass
class GroundTruthTrajectory:
    """Samples g(t) at the IMU rate; poses rows are (x, y, theta)"""
    t_us: np.ndarray
    poses: np.ndarray
    path_length: float = field(default=0.0)

    def __len__(self) -> int:
        return int(self.t_us.shape[0])

    @property
    def samples(self) -> List[tuple]:
        return [(int(t), Pose2.from_array(p)) for t, p in zip(self.t_us, self.poses)]

    def pose(self, k: int) -> Pose2:
        return Pose2.from_array(self.poses[k])

    @property
    def duration_us(self) -> int:
        return int(self.t_us[-1] - self.t_us[0]) if len(self) else 0


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _exp1_waypoints(laps: int = 14) -> List[tuple]:
    # 22.16 m lap = 2216 steps + 4 pivots = 2220 ticks (111 RTT epochs) when every
    # lap, the first included, starts with the pivot out of the last leg heading
    lap = [(9.08, 1.0), (9.08, 4.0), (1.0, 4.0), (1.0, 1.0)]
    return [(1.0, 1.0)] + lap * laps


def _exp2_waypoints() -> List[tuple]:
    outer = [(18.0, 2.0), (18.0, 33.0), (2.0, 33.0), (2.0, 2.0)]
    inner = [(10.0, 2.0), (10.0, 18.0), (2.0, 18.0), (2.0, 2.0)]
    return [(2.0, 2.0)] + outer * 2 + inner


PRESETS: Dict[str, dict] = {
    # One router and three satellite points in a 10 m x 5 m flat
    "exp1": dict(
        name="exp1",
        area=(10.0, 5.0),
        waypoints=_exp1_waypoints(),
        start_heading=-math.pi / 2,
        speed=1.0,
        imu_rate=100,
        rtt_rate=5,
        aps=[(0.5, 0.5), (9.5, 1.5), (6.0, 4.5), (1.5, 4.5)],
    ),
    # House plus garden and road, 20 m x 35 m
    "exp2": dict(
        name="exp2",
        area=(20.0, 35.0),
        waypoints=_exp2_waypoints(),
        speed=1.0,
        imu_rate=100,
        rtt_rate=5,
        aps=[(1.0, 1.0), (19.0, 1.0), (19.0, 17.0), (1.0, 17.0), (19.0, 34.0), (1.0, 34.0)],
    ),
}


def preset_config(name: str, **overrides) -> ScenarioConfig:
    """ScenarioConfig for a named preset, with optional field overrides"""
    if name not in PRESETS:
        raise ScenarioError(f"unknown scenario preset '{name}' (known: {', '.join(sorted(PRESETS))})")
    values = dict(PRESETS[name])
    if "waypoints" in overrides and "start_heading" not in overrides:
        # a preset heading belongs to the preset route
        values.pop("start_heading", None)
    values.update(overrides)
    return ScenarioConfig(**values)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def build_scenario(cfg: ScenarioConfig) -> Scenario:
    """
    Validate a scenario configuration and derive its timing constants

    Raises:
        ScenarioError: fewer than two waypoints, repeated consecutive waypoints,
            points outside the area, or incompatible rates
    """
    width, height = cfg.area
    if width <= 0 or height <= 0:
        raise ScenarioError(f"area must be positive, got {cfg.area}")
    if len(cfg.waypoints) < 2:
        raise ScenarioError("a scenario needs at least two waypoints")

    def inside(p) -> bool:
        return 0.0 <= p[0] <= width and 0.0 <= p[1] <= height

    for i, w in enumerate(cfg.waypoints):
        if not inside(w):
            raise ScenarioError(f"waypoint {i} {w} lies outside the {width} x {height} m area")
    for i, ap in enumerate(cfg.aps):
        if not inside(ap):
            raise ScenarioError(f"AP {i} {ap} lies outside the {width} x {height} m area")
    for i, (a, b) in enumerate(zip(cfg.waypoints, cfg.waypoints[1:])):
        if math.hypot(b[0] - a[0], b[1] - a[1]) == 0.0:
            raise ScenarioError(f"waypoints {i} and {i + 1} coincide")

    if cfg.imu_rate % cfg.rtt_rate != 0:
        raise ScenarioError(
            f"imu_rate ({cfg.imu_rate} Hz) must be an integer multiple of rtt_rate ({cfg.rtt_rate} Hz)"
        )
    if MICROS_PER_SECOND % cfg.imu_rate != 0:
        raise ScenarioError(f"imu_rate {cfg.imu_rate} Hz does not give an integral microsecond period")
    if len(cfg.aps) > 255:
        raise ScenarioError("at most 255 APs fit the wire format")

    (x0, y0), (x1, y1) = cfg.waypoints[0], cfg.waypoints[1]
    heading = cfg.start_heading if cfg.start_heading is not None else math.atan2(y1 - y0, x1 - x0)

    scenario = Scenario(
        config=cfg,
        aps=np.asarray(cfg.aps, dtype=float).reshape(-1, 2),
        period_us=MICROS_PER_SECOND // cfg.imu_rate,
        ticks_per_epoch=cfg.imu_rate // cfg.rtt_rate,
        start_pose=Pose2(x0, y0, heading),
    )
    app_logger.debug(
        f"Scenario '{cfg.name}': {len(cfg.waypoints)} waypoints, {scenario.n_aps} APs, "
        f"{cfg.imu_rate} Hz IMU / {cfg.rtt_rate} Hz RTT"
    )
    return scenario


def sample_ground_truth(s: Scenario) -> GroundTruthTrajectory:
    """
    Constant-speed traversal of the waypoints sampled at the IMU rate

    Each leg ends with a (possibly shortened) step landing exactly on its
    waypoint; a heading change is executed as a single in-place pivot tick.
    The robot then holds still at the last waypoint until the next RTT epoch,
    so the final sample is always a keyframe.
    """
    cfg = s.config
    step = cfg.speed / cfg.imu_rate
    start = s.start_pose
    chunks = [np.array([[start.x, start.y, start.theta]])]
    heading = start.theta

    for a, b in zip(cfg.waypoints, cfg.waypoints[1:]):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        leg = b - a
        length = float(np.hypot(leg[0], leg[1]))
        leg_heading = math.atan2(leg[1], leg[0])

        if wrap_angle(leg_heading - heading) != 0.0:
            chunks.append(np.array([[a[0], a[1], leg_heading]]))
        heading = leg_heading

        n = int(math.ceil(length / step - 1e-9))
        s_along = np.minimum(np.arange(1, n + 1) * step, length)
        direction = leg / length
        pts = a + s_along[:, None] * direction
        pts[-1] = b
        chunks.append(np.column_stack([pts, np.full(n, leg_heading)]))

    poses = np.vstack(chunks)
    hold = -(poses.shape[0] - 1) % s.ticks_per_epoch
    if hold:
        poses = np.vstack([poses, np.repeat(poses[-1:], hold, axis=0)])
    t_us = np.arange(poses.shape[0], dtype=np.int64) * s.period_us
    path_length = float(np.hypot(*np.diff(poses[:, :2], axis=0).T).sum()) if len(poses) > 1 else 0.0
    return GroundTruthTrajectory(t_us=t_us, poses=poses, path_length=path_length)


def _true_increments(gt: GroundTruthTrajectory):
    d = np.diff(gt.poses, axis=0)
    true_dd = np.hypot(d[:, 0], d[:, 1])
    true_dth = np.arctan2(np.sin(d[:, 2]), np.cos(d[:, 2]))
    dt = np.diff(gt.t_us).astype(float) / MICROS_PER_SECOND
    return true_dd, true_dth, dt


def synthesize_imu(gt: GroundTruthTrajectory, n: ImuNoiseModel, seed: int) -> List[OdometrySample]:
    """
    Noisy body-frame odometry increments, one per IMU tick after the first sample

    dd = true_dd * (1 + scale_err) + N(0, odom_sigma^2 dt)
    dtheta = true_dtheta + gyro_bias dt + N(0, gyro_sigma^2 dt)
    """
    if len(gt) == 0:
        raise ScenarioError("ground truth is empty")
    true_dd, true_dth, dt = _true_increments(gt)
    rng = np.random.default_rng((seed, _IMU_STREAM))
    noise_dd = rng.standard_normal(true_dd.shape[0])
    noise_th = rng.standard_normal(true_dd.shape[0])

    sqrt_dt = np.sqrt(dt)
    dd = true_dd * (1.0 + n.odom_scale_err) + n.odom_sigma * sqrt_dt * noise_dd
    dth = true_dth + n.gyro_bias * dt + n.gyro_sigma * sqrt_dt * noise_th

    return [
        OdometrySample(t=int(t), dd=float(a), dtheta=float(b))
        for t, a, b in zip(gt.t_us[1:], dd, dth)
    ]


def epoch_indices(gt: GroundTruthTrajectory, s: Scenario) -> np.ndarray:
    """IMU sample indices that are RTT epochs (positive multiples of ticks_per_epoch)"""
    return np.arange(s.ticks_per_epoch, len(gt), s.ticks_per_epoch)


def _corrupt_ranges(true_range: np.ndarray, n: RttNoiseModel, rng: np.random.Generator):
    """Draw all randomness for a block of (epoch, AP) ranges; returns (ranges, keep mask)"""
    shape = true_range.shape
    u_drop = rng.random(shape)
    gauss = rng.standard_normal(shape)
    u_mp = rng.random(shape)
    bias = rng.exponential(n.multipath_bias_mean, shape)
    ranges = true_range + n.range_sigma * gauss + np.where(u_mp < n.multipath_prob, bias, 0.0)
    return np.maximum(ranges, 0.0), u_drop >= n.dropout_prob


def synthesize_rtt(
    gt: GroundTruthTrajectory, s: Scenario, n: RttNoiseModel, seed: int
) -> List[RttSample]:
    """
    Per-epoch, per-AP ranges with Gaussian noise, positive exponential multipath
    outliers and dropouts; ordered by (epoch, ap_id)
    """
    if s.n_aps == 0:
        raise ScenarioError("RTT synthesis needs at least one AP")
    idx = epoch_indices(gt, s)
    if idx.size == 0:
        return []
    pos = gt.poses[idx, :2]
    true_range = np.linalg.norm(pos[:, None, :] - s.aps[None, :, :], axis=2)
    rng = np.random.default_rng((seed, _RTT_STREAM))
    ranges, keep = _corrupt_ranges(true_range, n, rng)

    out: List[RttSample] = []
    for e, k in enumerate(idx):
        t = int(gt.t_us[k])
        for ap in range(s.n_aps):
            if keep[e, ap]:
                out.append(RttSample(t=t, ap_id=ap, range=float(ranges[e, ap])))
    return out


class OnlineSensors:
    """
    Tick-by-tick sensor corruption for closed-loop runs, using the same noise
    models as the batch synthesizers
    """

    def __init__(self, scenario: Scenario, seed: int):
        self.scenario = scenario
        cfg = scenario.config
        self.imu_noise = cfg.imu_noise
        self.rtt_noise = cfg.rtt_noise
        self._imu_rng = np.random.default_rng((seed, _IMU_STREAM))
        self._rtt_rng = np.random.default_rng((seed, _RTT_STREAM))

    def odometry(self, t: Timestamp, true_dd: float, true_dtheta: float, dt: float) -> OdometrySample:
        n = self.imu_noise
        e_dd, e_th = self._imu_rng.standard_normal(2)
        sqrt_dt = math.sqrt(dt)
        return OdometrySample(
            t=t,
            dd=true_dd * (1.0 + n.odom_scale_err) + n.odom_sigma * sqrt_dt * float(e_dd),
            dtheta=true_dtheta + n.gyro_bias * dt + n.gyro_sigma * sqrt_dt * float(e_th),
        )

    def ranges(self, t: Timestamp, x: float, y: float) -> List[RttSample]:
        true_range = np.linalg.norm(self.scenario.aps - np.array([x, y]), axis=1)[None, :]
        ranges, keep = _corrupt_ranges(true_range, self.rtt_noise, self._rtt_rng)
        return [
            RttSample(t=t, ap_id=ap, range=float(ranges[0, ap]))
            for ap in range(self.scenario.n_aps)
            if keep[0, ap]
        ]


def rtt_epochs(samples: Sequence[RttSample]) -> Dict[Timestamp, List[RttSample]]:
    """Group RTT samples by epoch timestamp, preserving order"""
    grouped: Dict[Timestamp, List[RttSample]] = {}
    for r in samples:
        grouped.setdefault(r.t, []).append(r)
    return grouped


@dataclass
class SensorStreams:
    """Ground truth plus the sensor streams derived from it"""
    gt: GroundTruthTrajectory
    odometry: List[OdometrySample]
    ranges: List[RttSample]

    def truncate(self, duration_us: int) -> "SensorStreams":
        """Keep only samples with t <= duration_us"""
        keep = int(np.searchsorted(self.gt.t_us, duration_us, side="right"))
        poses = self.gt.poses[:keep]
        gt = GroundTruthTrajectory(
            t_us=self.gt.t_us[:keep],
            poses=poses,
            path_length=float(np.hypot(*np.diff(poses[:, :2], axis=0).T).sum()) if keep > 1 else 0.0,
        )
        return SensorStreams(
            gt=gt,
            odometry=[o for o in self.odometry if o.t <= duration_us],
            ranges=[r for r in self.ranges if r.t <= duration_us],
        )


def generate_streams(s: Scenario, seed: Optional[int] = None) -> SensorStreams:
    """Ground truth plus both sensor streams for one seed (defaults to the scenario seed)"""
    seed = s.config.seed if seed is None else seed
    gt = sample_ground_truth(s)
    odometry = synthesize_imu(gt, s.config.imu_noise, seed)
    ranges = synthesize_rtt(gt, s, s.config.rtt_noise, seed) if s.n_aps else []
    return SensorStreams(gt=gt, odometry=odometry, ranges=ranges)
