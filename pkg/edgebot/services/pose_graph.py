"""
2D pose graph: keyframe nodes, odometry edges, same-place loop edges

Residual conventions
    odometry  r = between(delta, between(x_i, x_j)), heading wrapped
    loop      r = (p_j - p_i) / sigma_lc, heading unconstrained
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Literal, Optional, Tuple

import numpy as np

from edgebot.core.errors import GeometryError
from edgebot.models.geometry import Pose2, Timestamp, information_matrix, wrap_angle


class Fingerprint:
    """Per-AP latest range for one RTT epoch; NaN marks a missing AP"""

    __slots__ = ("epoch", "ranges")

    def __init__(self, n_aps: int, epoch: Timestamp = 0, ranges: Optional[Iterable[float]] = None):
        self.epoch = epoch
        if ranges is None:
            self.ranges = np.full(n_aps, np.nan)
        else:
            self.ranges = np.array(
                [np.nan if r is None else float(r) for r in ranges], dtype=float
            )

    def set(self, ap_id: int, range_m: float) -> None:
        if not 0 <= ap_id < self.ranges.shape[0]:
            raise IndexError(f"ap_id {ap_id} outside 0..{self.ranges.shape[0] - 1}")
        self.ranges[ap_id] = range_m

    @property
    def present(self) -> int:
        return int(np.count_nonzero(~np.isnan(self.ranges)))

    def __repr__(self) -> str:
        return f"Fingerprint(epoch={self.epoch}, ranges={self.ranges.tolist()})"


@dataclass
class KeyframeNode:
    id: int
    pose: Pose2
    fingerprint: Optional[Fingerprint] = None
    t_us: Timestamp = 0


@dataclass
class OdomEdge:
    i: int
    j: int
    delta: Pose2
    info: np.ndarray

    def __post_init__(self):
        if self.j != self.i + 1:
            raise GeometryError(f"odometry edge must join consecutive nodes, got ({self.i}, {self.j})")
        self.info = information_matrix(self.info)


@dataclass
class LoopEdge:
    i: int
    j: int
    sigma_lc: float = 0.5
    phi: float = 1.0
    weight: float = 1.0
    source: Literal["fingerprint", "injected", "file"] = "fingerprint"

    def __post_init__(self):
        if not self.i < self.j:
            raise GeometryError(f"loop edge needs i < j, got ({self.i}, {self.j})")
        if self.sigma_lc <= 0 or self.phi <= 0:
            raise GeometryError("loop edge sigma_lc and phi must be positive")


@dataclass
class PoseGraph:
    nodes: List[KeyframeNode] = field(default_factory=list)
    odom_edges: List[OdomEdge] = field(default_factory=list)
    loop_edges: List[LoopEdge] = field(default_factory=list)
    anchor_id: int = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def add_node(self, pose: Pose2, fingerprint: Optional[Fingerprint] = None, t_us: Timestamp = 0) -> KeyframeNode:
        node = KeyframeNode(id=len(self.nodes), pose=pose, fingerprint=fingerprint, t_us=t_us)
        self.nodes.append(node)
        return node

    def add_odom_edge(self, edge: OdomEdge) -> None:
        if edge.j >= len(self.nodes):
            raise GeometryError(f"odometry edge references missing node {edge.j}")
        if edge.i != len(self.odom_edges):
            raise GeometryError(f"odometry edge ({edge.i}, {edge.j}) out of chain order")
        self.odom_edges.append(edge)

    def add_loop_edge(self, edge: LoopEdge) -> None:
        if edge.j >= len(self.nodes):
            raise GeometryError(f"loop edge references missing node {edge.j}")
        self.loop_edges.append(edge)

    def check_connected(self) -> None:
        """The odometry chain must join every node to the anchor"""
        if len(self.odom_edges) != max(0, len(self.nodes) - 1):
            raise GeometryError(
                f"graph with {len(self.nodes)} nodes has {len(self.odom_edges)} odometry edges"
            )

    def poses_array(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, 3))
        return np.array([n.pose.as_array() for n in self.nodes])

    def set_poses(self, poses: np.ndarray) -> None:
        for node, row in zip(self.nodes, poses):
            node.pose = Pose2.from_array(row)

    def timestamps(self) -> np.ndarray:
        return np.array([n.t_us for n in self.nodes], dtype=np.int64)

    def copy(self) -> "PoseGraph":
        """Value copy: nodes and edges are new objects, fingerprints are shared read-only"""
        return PoseGraph(
            nodes=[replace(n) for n in self.nodes],
            odom_edges=[OdomEdge(e.i, e.j, e.delta, e.info.copy()) for e in self.odom_edges],
            loop_edges=[replace(e) for e in self.loop_edges],
            anchor_id=self.anchor_id,
        )


# ---------------------------------------------------------------------------
# Residuals
# ---------------------------------------------------------------------------

def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def residual_odom(edge: OdomEdge, x_i: Pose2, x_j: Pose2) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Odometry residual and its Jacobians

    Returns:
        (r, J_i, J_j) with r a 3-vector and 3x3 Jacobians w.r.t. (x, y, theta)
    """
    d = np.array([x_j.x - x_i.x, x_j.y - x_i.y])
    Ri_t = _rot(x_i.theta).T
    Rd_t = _rot(edge.delta.theta).T
    t_d = np.array([edge.delta.x, edge.delta.y])

    r = np.empty(3)
    r[:2] = Rd_t @ (Ri_t @ d - t_d)
    r[2] = wrap_angle(x_j.theta - x_i.theta - edge.delta.theta)

    c, s = math.cos(x_i.theta), math.sin(x_i.theta)
    dRi_t = np.array([[-s, c], [-c, -s]])
    A = Rd_t @ Ri_t

    J_i = np.zeros((3, 3))
    J_i[:2, :2] = -A
    J_i[:2, 2] = Rd_t @ dRi_t @ d
    J_i[2, 2] = -1.0

    J_j = np.zeros((3, 3))
    J_j[:2, :2] = A
    J_j[2, 2] = 1.0
    return r, J_i, J_j


def residual_loop(edge: LoopEdge, x_i: Pose2, x_j: Pose2) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Same-place residual (p_j - p_i) / sigma_lc and its 2x3 Jacobians
    """
    inv_sigma = 1.0 / edge.sigma_lc
    r = np.array([x_j.x - x_i.x, x_j.y - x_i.y]) * inv_sigma
    J_i = np.zeros((2, 3))
    J_i[0, 0] = J_i[1, 1] = -inv_sigma
    J_j = np.zeros((2, 3))
    J_j[0, 0] = J_j[1, 1] = inv_sigma
    return r, J_i, J_j


def odom_arrays(edges: List[OdomEdge]):
    """(I, J, deltas, info) stacked from odometry edge objects"""
    I = np.fromiter((e.i for e in edges), dtype=np.int64, count=len(edges))
    J = np.fromiter((e.j for e in edges), dtype=np.int64, count=len(edges))
    deltas = np.array([[e.delta.x, e.delta.y, e.delta.theta] for e in edges]).reshape(-1, 3)
    info = np.array([e.info for e in edges]).reshape(-1, 3, 3)
    return I, J, deltas, info


def odom_terms(poses: np.ndarray, edges: List[OdomEdge], arrays=None):
    """
    Vectorized odometry residuals over all edges

    Args:
        arrays: `odom_arrays(edges)` computed once by callers that evaluate
            the same edges many times

    Returns:
        (I, J, r, J_i, J_j, info): index arrays, (M,3) residuals, (M,3,3)
        Jacobians and (M,3,3) information matrices
    """
    I, J, deltas, info = arrays if arrays is not None else odom_arrays(edges)

    xi, xj = poses[I], poses[J]
    d = xj[:, :2] - xi[:, :2]
    ci, si = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    cd, sd = np.cos(deltas[:, 2]), np.sin(deltas[:, 2])

    # local = R_i^T d
    lx = ci * d[:, 0] + si * d[:, 1]
    ly = -si * d[:, 0] + ci * d[:, 1]
    ex = lx - deltas[:, 0]
    ey = ly - deltas[:, 1]

    r = np.empty((len(edges), 3))
    r[:, 0] = cd * ex + sd * ey
    r[:, 1] = -sd * ex + cd * ey
    dth = xj[:, 2] - xi[:, 2] - deltas[:, 2]
    r[:, 2] = np.arctan2(np.sin(dth), np.cos(dth))

    # A = R_d^T R_i^T = R(-(theta_i + theta_d))
    ca, sa = np.cos(xi[:, 2] + deltas[:, 2]), np.sin(xi[:, 2] + deltas[:, 2])
    # d(local)/d(theta_i) = (ly, -lx); rotate by R_d^T
    gx = cd * ly + sd * (-lx)
    gy = -sd * ly + cd * (-lx)

    J_i = np.zeros((len(edges), 3, 3))
    J_i[:, 0, 0] = -ca
    J_i[:, 0, 1] = -sa
    J_i[:, 1, 0] = sa
    J_i[:, 1, 1] = -ca
    J_i[:, 0, 2] = gx
    J_i[:, 1, 2] = gy
    J_i[:, 2, 2] = -1.0

    J_j = np.zeros((len(edges), 3, 3))
    J_j[:, 0, 0] = ca
    J_j[:, 0, 1] = sa
    J_j[:, 1, 0] = -sa
    J_j[:, 1, 1] = ca
    J_j[:, 2, 2] = 1.0
    return I, J, r, J_i, J_j, info


def loop_arrays(edges: List[LoopEdge]):
    """(I, J, inv_sigma) stacked from loop edge objects"""
    I = np.fromiter((e.i for e in edges), dtype=np.int64, count=len(edges))
    J = np.fromiter((e.j for e in edges), dtype=np.int64, count=len(edges))
    inv_sigma = np.fromiter((1.0 / e.sigma_lc for e in edges), dtype=float, count=len(edges))
    return I, J, inv_sigma


def loop_terms(poses: np.ndarray, edges: List[LoopEdge], arrays=None):
    """
    Vectorized loop residuals

    Returns:
        (I, J, r, inv_sigma) with r of shape (L, 2); Jacobians are -/+ I * inv_sigma
    """
    I, J, inv_sigma = arrays if arrays is not None else loop_arrays(edges)
    r = (poses[J, :2] - poses[I, :2]) * inv_sigma[:, None]
    return I, J, r, inv_sigma


# ---------------------------------------------------------------------------
# Text dump
# ---------------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def dump_graph(graph: PoseGraph) -> str:
    """Serialize as NODE / EDGE_ODOM / EDGE_LOOP records, one per line"""
    lines = []
    for n in graph.nodes:
        lines.append(" ".join(["NODE", str(n.id), _fmt(n.pose.x), _fmt(n.pose.y), _fmt(n.pose.theta)]))
    for e in graph.odom_edges:
        fields = ["EDGE_ODOM", str(e.i), str(e.j), _fmt(e.delta.x), _fmt(e.delta.y), _fmt(e.delta.theta)]
        fields.extend(_fmt(v) for v in e.info.reshape(-1))
        lines.append(" ".join(fields))
    for e in graph.loop_edges:
        lines.append(" ".join(["EDGE_LOOP", str(e.i), str(e.j), _fmt(e.sigma_lc), _fmt(e.phi)]))
    return "\n".join(lines) + "\n"


def load_graph(text: str) -> PoseGraph:
    """
    Parse the text dump format

    Raises:
        ValueError: unknown record type, wrong field count or unparsable number
    """
    graph = PoseGraph()
    nodes = {}
    odom: List[OdomEdge] = []
    loops: List[LoopEdge] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tag, *fields = line.split()
        try:
            if tag == "NODE" and len(fields) == 4:
                nid = int(fields[0])
                nodes[nid] = Pose2(*map(float, fields[1:]))
            elif tag == "EDGE_ODOM" and len(fields) == 14:
                i, j = int(fields[0]), int(fields[1])
                delta = Pose2(*map(float, fields[2:5]))
                info = np.array(list(map(float, fields[5:])), dtype=float).reshape(3, 3)
                odom.append(OdomEdge(i, j, delta, info))
            elif tag == "EDGE_LOOP" and len(fields) == 4:
                loops.append(
                    LoopEdge(int(fields[0]), int(fields[1]), float(fields[2]), float(fields[3]), source="file")
                )
            else:
                raise ValueError(f"unknown record '{tag}' with {len(fields)} fields")
        except (ValueError, GeometryError) as e:
            raise ValueError(f"graph line {lineno}: {e}") from e

    if sorted(nodes) != list(range(len(nodes))):
        raise ValueError("node ids must be dense 0..N-1")
    for nid in range(len(nodes)):
        graph.add_node(nodes[nid])
    for e in sorted(odom, key=lambda e: e.i):
        graph.add_odom_edge(e)
    for e in loops:
        graph.add_loop_edge(e)
    return graph
