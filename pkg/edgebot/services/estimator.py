"""
Localization core: PDR integration, keyframing, RTT-fingerprint loop closures

`Estimator` is owned by exactly one task (the edge control task or the offline
pipeline). `optimize` runs on a copy of its graph and the result is merged back.
"""
import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from edgebot.core.logging import app_logger
from edgebot.models.geometry import MICROS_PER_SECOND, Pose2, Timestamp, compose
from edgebot.models.schemas import DetectorConfig, KeyframeModel, SolverConfig, SolveStats
from edgebot.services.optimizer import optimize
from edgebot.services.pose_graph import Fingerprint, KeyframeNode, LoopEdge, OdomEdge, PoseGraph

# Row block for the pairwise fingerprint distance matrix
_DETECT_BLOCK = 256


@dataclass(frozen=True, slots=True)
class Increment:
    """Odometry increment as seen by the estimator; dt_us is the gap to the previous sample"""
    t: Timestamp
    dd: float
    dtheta: float
    dt_us: int = 0


def pdr_integrate(pose: Pose2, od) -> Pose2:
    """Advance `pose` by one (dd, dtheta) increment along the mean heading"""
    mid = pose.theta + od.dtheta / 2.0
    return Pose2(
        pose.x + od.dd * math.cos(mid),
        pose.y + od.dd * math.sin(mid),
        pose.theta + od.dtheta,
    )


def integrate(pose: Pose2, increments: Iterable) -> Pose2:
    for od in increments:
        pose = pdr_integrate(pose, od)
    return pose


def fingerprint_distance(a: Fingerprint, b: Fingerprint, min_aps: int = 3) -> Optional[float]:
    """RMS range difference over co-present APs, or None when fewer than `min_aps` overlap"""
    both = ~(np.isnan(a.ranges) | np.isnan(b.ranges))
    n = int(np.count_nonzero(both))
    if n < min_aps:
        return None
    diff = a.ranges[both] - b.ranges[both]
    return float(np.sqrt(np.mean(diff * diff)))


def odometry_information(
    increments: Sequence, elapsed_s: float, gap_s: float, model: KeyframeModel
) -> np.ndarray:
    """
    Diagonal information for a composed odometry edge

    Translation variance grows with distance travelled, rotation variance with
    turned angle and elapsed time; missing IMU time widens both by 1 + gap/elapsed.
    """
    distance = sum(abs(od.dd) for od in increments)
    turned = sum(abs(od.dtheta) for od in increments)
    var_t = max(model.var_floor, model.trans_var_per_m * distance)
    var_r = max(model.var_floor, model.rot_var_per_rad * turned + model.rot_var_per_s * elapsed_s)
    if elapsed_s > 0.0 and gap_s > 0.0:
        factor = 1.0 + gap_s / elapsed_s
        var_t *= factor
        var_r *= factor
    return np.diag([1.0 / var_t, 1.0 / var_t, 1.0 / var_r])


def make_keyframe(
    increments: Sequence,
    fingerprint: Optional[Fingerprint],
    prev: KeyframeNode,
    elapsed_s: float = 0.0,
    gap_s: float = 0.0,
    model: Optional[KeyframeModel] = None,
    t_us: Timestamp = 0,
) -> Tuple[KeyframeNode, OdomEdge]:
    """
    Compose the increments since `prev` into a new node and its odometry edge

    Returns:
        (node, edge); the node's id is prev.id + 1 and its pose prev.pose ⊕ delta
    """
    model = model or KeyframeModel()
    delta = integrate(Pose2.identity(), increments)
    info = odometry_information(increments, elapsed_s, gap_s, model)
    node = KeyframeNode(id=prev.id + 1, pose=compose(prev.pose, delta), fingerprint=fingerprint, t_us=t_us)
    return node, OdomEdge(prev.id, node.id, delta, info)


def fingerprint_matrix(nodes: Sequence[KeyframeNode], n_aps: Optional[int] = None) -> np.ndarray:
    """Stack node fingerprints into an (N, APs) array with NaN for missing ranges"""
    if n_aps is None:
        n_aps = max((n.fingerprint.ranges.shape[0] for n in nodes if n.fingerprint is not None), default=0)
    F = np.full((len(nodes), n_aps), np.nan)
    for k, n in enumerate(nodes):
        if n.fingerprint is not None:
            F[k, : n.fingerprint.ranges.shape[0]] = n.fingerprint.ranges
    return F


def _candidates_for_rows(F: np.ndarray, rows: np.ndarray, cfg: DetectorConfig):
    """Distance matrix block for `rows` vs all nodes, masked to the detection gate"""
    A = F[rows][:, None, :]
    B = F[None, :, :]
    diff = A - B
    both = ~np.isnan(diff)
    count = both.sum(axis=2)
    sq = np.where(both, diff * diff, 0.0).sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.sqrt(sq / count)
    sep = np.arange(F.shape[0])[None, :] - rows[:, None]
    mask = (sep >= cfg.min_separation) & (count >= cfg.min_aps_for_match) & (dist <= cfg.match_threshold)
    return dist, mask


def detect_loop_closures(
    nodes: Sequence[KeyframeNode],
    cfg: Optional[DetectorConfig] = None,
    existing: Sequence[LoopEdge] = (),
    phi: float = 1.0,
) -> List[LoopEdge]:
    """
    Gate every pair (i, j) with j - i >= min_separation on fingerprint distance

    For each i, every contiguous run of matching j contributes its closest
    match; a candidate within suppression_window of an accepted or existing
    edge on both ends is skipped.
    """
    cfg = cfg or DetectorConfig()
    N = len(nodes)
    if N < 2:
        return []
    F = fingerprint_matrix(nodes)

    candidates: List[Tuple[int, int]] = []
    for start in range(0, N, _DETECT_BLOCK):
        rows = np.arange(start, min(N, start + _DETECT_BLOCK))
        dist, mask = _candidates_for_rows(F, rows, cfg)
        for r, i in enumerate(rows):
            js = np.flatnonzero(mask[r])
            if js.size == 0:
                continue
            breaks = np.flatnonzero(np.diff(js) > 1) + 1
            for run in np.split(js, breaks):
                candidates.append((int(i), int(run[np.argmin(dist[r, run])])))

    w = cfg.suppression_window
    existing_pairs = {(e.i, e.j) for e in existing}
    # accepted (i, j) so far; rows past `m` are unused
    accepted = np.empty((len(existing) + len(candidates), 2), dtype=np.int64)
    m = len(existing)
    for k, e in enumerate(existing):
        accepted[k] = (e.i, e.j)
    out: List[LoopEdge] = []
    for i, j in candidates:
        if (i, j) in existing_pairs:
            continue
        if m and np.any((np.abs(accepted[:m, 0] - i) <= w) & (np.abs(accepted[:m, 1] - j) <= w)):
            continue
        out.append(LoopEdge(i, j, sigma_lc=cfg.sigma_lc, phi=phi))
        accepted[m] = (i, j)
        m += 1
    return out


class Estimator:
    """Single-owner localization state: pending odometry, fingerprints, pose graph"""

    def __init__(
        self,
        n_aps: int,
        start_pose: Optional[Pose2] = None,
        keyframes: Optional[KeyframeModel] = None,
        detector: Optional[DetectorConfig] = None,
        solver: Optional[SolverConfig] = None,
    ):
        self.n_aps = n_aps
        self.start_pose = start_pose or Pose2.identity()
        self.keyframe_model = keyframes or KeyframeModel()
        self.detector = detector or DetectorConfig()
        self.solver = solver or SolverConfig()
        self.graph = PoseGraph()
        self.pdr_poses: List[Pose2] = []
        self.pending: List[Increment] = []
        self.fingerprints: Dict[Timestamp, Fingerprint] = {}
        self.last_keyframe_t: Timestamp = 0
        self.last_stats: Optional[SolveStats] = None
        self.imu_gap_us = 0
        self.odometry_count = 0
        self.range_count = 0

    # -- inputs ------------------------------------------------------------

    def add_odometry(self, t: Timestamp, dd: float, dtheta: float, dt_us: int = 0) -> None:
        self.pending.append(Increment(t, dd, dtheta, dt_us))
        self.odometry_count += 1

    def fingerprint_for(self, epoch: Timestamp) -> Fingerprint:
        fp = self.fingerprints.get(epoch)
        if fp is None:
            fp = self.fingerprints[epoch] = Fingerprint(self.n_aps, epoch)
        return fp

    def add_range(self, t: Timestamp, ap_id: int, range_m: float) -> None:
        """Fill slot (t, ap_id); a keyframe made for epoch t sees late arrivals"""
        self.fingerprint_for(t).set(ap_id, range_m)
        self.range_count += 1

    # -- keyframes ---------------------------------------------------------

    def make_keyframe(self, epoch: Timestamp) -> KeyframeNode:
        """
        Close the current epoch: the first keyframe becomes the anchor, every
        later one adds a node and an odometry edge from the previous node
        """
        taken = [od for od in self.pending if od.t <= epoch]
        self.pending = [od for od in self.pending if od.t > epoch]
        fingerprint = self.fingerprint_for(epoch)

        elapsed_us = epoch - self.last_keyframe_t
        covered_us = sum(od.dt_us for od in taken)
        if taken and covered_us == 0:
            # increments without timing information
            gap_us = 0
        else:
            gap_us = max(0, elapsed_us - covered_us)
        self.imu_gap_us += gap_us

        if not self.graph.nodes:
            pose = integrate(self.start_pose, taken)
            node = self.graph.add_node(pose, fingerprint, t_us=epoch)
            self.pdr_poses.append(pose)
        else:
            prev = self.graph.nodes[-1]
            node, edge = make_keyframe(
                taken,
                fingerprint,
                prev,
                elapsed_s=elapsed_us / MICROS_PER_SECOND,
                gap_s=gap_us / MICROS_PER_SECOND,
                model=self.keyframe_model,
                t_us=epoch,
            )
            self.graph.nodes.append(node)
            self.graph.add_odom_edge(edge)
            self.pdr_poses.append(compose(self.pdr_poses[-1], edge.delta))
        self.last_keyframe_t = epoch
        return node

    @property
    def keyframe_count(self) -> int:
        return len(self.graph.nodes)

    @property
    def latest_pose(self) -> Pose2:
        """Last keyframe estimate dead-reckoned forward over pending odometry"""
        base = self.graph.nodes[-1].pose if self.graph.nodes else self.start_pose
        return integrate(base, self.pending)

    # -- loop closures and solving ----------------------------------------

    def detect_new_closures(self) -> List[LoopEdge]:
        """Detect closures over all keyframes, keeping only ones not already bridged"""
        edges = detect_loop_closures(
            self.graph.nodes, self.detector, existing=self.graph.loop_edges, phi=self.solver.phi
        )
        for e in edges:
            self.graph.add_loop_edge(e)
        if edges:
            app_logger.debug(f"Detected {len(edges)} new loop closures ({len(self.graph.loop_edges)} total)")
        return edges

    def solve(self, cfg: Optional[SolverConfig] = None) -> SolveStats:
        """Optimize a copy of the graph and merge poses and weights back"""
        solved, stats = optimize(self.graph, cfg or self.solver)
        self.merge(solved, stats)
        return stats

    def merge(self, solved: PoseGraph, stats: SolveStats) -> None:
        """Adopt a solved copy; nodes and loop edges added meanwhile are re-based"""
        n = len(solved.nodes)
        for node, new in zip(self.graph.nodes[:n], solved.nodes):
            node.pose = new.pose
        for edge, new in zip(self.graph.loop_edges, solved.loop_edges):
            edge.weight = new.weight
        # Later nodes follow the last solved node through their odometry edges
        for k in range(n, len(self.graph.nodes)):
            edge = self.graph.odom_edges[k - 1]
            self.graph.nodes[k].pose = compose(self.graph.nodes[k - 1].pose, edge.delta)
        self.last_stats = stats

    def trajectory(self) -> List[Tuple[Timestamp, Pose2]]:
        return [(n.t_us, n.pose) for n in self.graph.nodes]

    def pdr_trajectory(self) -> List[Tuple[Timestamp, Pose2]]:
        return [(n.t_us, p) for n, p in zip(self.graph.nodes, self.pdr_poses)]
