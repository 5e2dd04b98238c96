"""
Estimator: PDR, keyframing, fingerprint matching and the offline pipeline
"""
import math

import numpy as np
import pytest

from edgebot.models.geometry import Pose2
from edgebot.models.schemas import DetectorConfig, KeyframeModel
from edgebot.services.estimator import (
    Estimator,
    Increment,
    detect_loop_closures,
    fingerprint_distance,
    integrate,
    make_keyframe,
    pdr_integrate,
)
from edgebot.services.evaluation import error_series
from edgebot.services.experiment import run_pipeline
from edgebot.services.optimizer import optimize
from edgebot.services.pose_graph import Fingerprint, KeyframeNode, LoopEdge
from edgebot.services.simulator import generate_streams


def fp(*ranges):
    return Fingerprint(len(ranges), ranges=ranges)


# ---------------------------------------------------------------------------
# PDR
# ---------------------------------------------------------------------------

def test_pdr_zero_increment_keeps_pose():
    pose = Pose2(1.0, -2.0, 0.7)
    assert pdr_integrate(pose, Increment(0, 0.0, 0.0)) == pose


def test_pdr_straight_line():
    pose = integrate(Pose2.identity(), [Increment(k, 0.01, 0.0) for k in range(100)])
    assert pose.as_array() == pytest.approx([1.0, 0.0, 0.0], abs=1e-9)


def test_pdr_full_turn_in_place():
    pose = integrate(Pose2.identity(), [Increment(k, 0.0, math.pi / 2) for k in range(4)])
    assert math.cos(pose.theta) == pytest.approx(1.0)
    assert math.sin(pose.theta) == pytest.approx(0.0, abs=1e-12)
    assert (pose.x, pose.y) == (0.0, 0.0)


def test_pdr_uses_mean_heading():
    pose = pdr_integrate(Pose2.identity(), Increment(0, 1.0, math.pi / 2))
    assert pose.x == pytest.approx(math.cos(math.pi / 4))
    assert pose.y == pytest.approx(math.sin(math.pi / 4))


# ---------------------------------------------------------------------------
# Keyframes
# ---------------------------------------------------------------------------

def test_make_keyframe_without_increments():
    prev = KeyframeNode(id=4, pose=Pose2(1.0, 2.0, 0.5))
    node, edge = make_keyframe([], fp(1.0, 2.0, 3.0), prev)
    assert node.id == 5
    assert node.pose.as_array() == pytest.approx(prev.pose.as_array())
    assert edge.delta.as_array() == pytest.approx([0.0, 0.0, 0.0])
    assert (edge.i, edge.j) == (4, 5)


def test_make_keyframe_composes_increments():
    prev = KeyframeNode(id=0, pose=Pose2(1.0, 1.0, math.pi / 2))
    node, edge = make_keyframe([Increment(k, 0.01, 0.0) for k in range(20)], None, prev)
    assert edge.delta.as_array() == pytest.approx([0.2, 0.0, 0.0])
    assert node.pose.as_array() == pytest.approx([1.0, 1.2, math.pi / 2])


def test_information_follows_covariance_model():
    model = KeyframeModel(trans_var_per_m=0.01, rot_var_per_rad=0.0, rot_var_per_s=0.001, var_floor=1e-4)
    increments = [Increment(k, 0.05, 0.0) for k in range(20)]
    _, edge = make_keyframe(increments, None, KeyframeNode(0, Pose2.identity()), elapsed_s=0.2, model=model)
    # 1 m travelled, 0.2 s elapsed
    assert np.diag(edge.info) == pytest.approx([100.0, 100.0, 5000.0])


def test_imu_gap_widens_covariance():
    increments = [Increment(k, 0.01, 0.001) for k in range(20)]
    prev = KeyframeNode(0, Pose2.identity())
    _, full = make_keyframe(increments, None, prev, elapsed_s=0.4, gap_s=0.0)
    _, gappy = make_keyframe(increments, None, prev, elapsed_s=0.4, gap_s=0.2)
    assert np.diag(gappy.info) == pytest.approx(np.diag(full.info) / 1.5)


def test_estimator_accounts_missing_imu_time():
    est = Estimator(n_aps=4)
    for k in range(1, 11):
        est.add_odometry(k * 10_000, 0.01, 0.0, 10_000)
    est.make_keyframe(200_000)
    assert est.imu_gap_us == 100_000

    # increments without timing information are not a gap
    est.add_odometry(300_000, 0.01, 0.0)
    est.make_keyframe(400_000)
    assert est.imu_gap_us == 100_000
    assert est.keyframe_count == 2


def test_late_range_reaches_its_keyframe():
    est = Estimator(n_aps=4)
    est.make_keyframe(200_000)
    est.add_range(200_000, 2, 3.0)
    assert est.graph.nodes[0].fingerprint.ranges[2] == 3.0


def test_latest_pose_includes_pending_odometry():
    est = Estimator(n_aps=4, start_pose=Pose2(1.0, 1.0, 0.0))
    for k in range(1, 21):
        est.add_odometry(k * 10_000, 0.01, 0.0, 10_000)
    est.make_keyframe(200_000)
    est.add_odometry(210_000, 0.01, 0.0, 10_000)
    assert est.latest_pose.x == pytest.approx(1.21)
    assert est.graph.nodes[0].pose.x == pytest.approx(1.2)


# ---------------------------------------------------------------------------
# Fingerprints and loop detection
# ---------------------------------------------------------------------------

def test_fingerprint_distance_examples():
    assert fingerprint_distance(fp(1, 2, 3, 4), fp(1, 2, 3, 4)) == 0.0
    assert fingerprint_distance(fp(1, 2, 3, None), fp(1, 2, 3, 9)) == 0.0
    assert fingerprint_distance(fp(1, 2, 3), fp(2, 3, 4)) == pytest.approx(1.0)


def test_fingerprint_distance_incomparable():
    assert fingerprint_distance(fp(1, 2, None, None), fp(1, 2, 3, 4)) is None
    assert fingerprint_distance(fp(1, 2, None), fp(1, 2, 5), min_aps=2) == 0.0


def nodes_from(ranges_rows):
    return [
        KeyframeNode(id=k, pose=Pose2(float(k), 0.0, 0.0), fingerprint=fp(*row))
        for k, row in enumerate(ranges_rows)
    ]


def test_no_revisit_no_closures():
    nodes = nodes_from([[0.1 * k] * 4 for k in range(120)])
    assert detect_loop_closures(nodes, DetectorConfig()) == []


def revisit_nodes():
    # nodes 60.. retrace the fingerprints of nodes 0..
    rows = [[0.1 * k, 0.1 * k + 1.0, 5.0 - 0.1 * k, 2.0] for k in range(60)]
    rows += rows[:30]
    return nodes_from(rows)


def test_exact_revisit_gives_closure():
    nodes = revisit_nodes()
    cfg = DetectorConfig()
    edges = detect_loop_closures(nodes, cfg)
    assert (0, 60) in {(e.i, e.j) for e in edges}
    for e in edges:
        assert e.j - e.i >= cfg.min_separation
        assert fingerprint_distance(nodes[e.i].fingerprint, nodes[e.j].fingerprint) <= cfg.match_threshold
        assert e.sigma_lc == cfg.sigma_lc
        assert e.weight == 1.0


def test_closures_are_suppressed_near_accepted_ones():
    cfg = DetectorConfig()
    edges = detect_loop_closures(revisit_nodes(), cfg)
    w = cfg.suppression_window
    for a in edges:
        for b in edges:
            if a is not b:
                assert not (abs(a.i - b.i) <= w and abs(a.j - b.j) <= w)


def test_existing_edges_are_not_repeated():
    nodes = revisit_nodes()
    first = detect_loop_closures(nodes, DetectorConfig())
    again = detect_loop_closures(nodes, DetectorConfig(), existing=first)
    assert again == []


def test_distant_places_with_equal_fingerprints_match():
    rows = [[float(k), float(k), float(k), float(k)] for k in range(60)]
    rows[55] = list(rows[0])
    nodes = nodes_from(rows)
    nodes[55].pose = Pose2(40.0, 30.0, 0.0)
    edges = detect_loop_closures(nodes, DetectorConfig())
    assert [(e.i, e.j) for e in edges] == [(0, 55)]


def test_too_few_shared_aps_never_match():
    rows = [[1.0, 2.0, None, None] for _ in range(60)]
    assert detect_loop_closures(nodes_from(rows), DetectorConfig(min_aps_for_match=3)) == []


def test_estimator_adds_closures_once():
    est = Estimator(n_aps=4)
    for k, node in enumerate(revisit_nodes()):
        epoch = (k + 1) * 200_000
        for ap, r in enumerate(node.fingerprint.ranges):
            est.add_range(epoch, ap, r)
        est.make_keyframe(epoch)
    first = est.detect_new_closures()
    assert first
    assert est.detect_new_closures() == []
    assert len(est.graph.loop_edges) == len(first)
    assert all(isinstance(e, LoopEdge) for e in est.graph.loop_edges)


# ---------------------------------------------------------------------------
# Offline pipeline
# ---------------------------------------------------------------------------

def test_zero_noise_pipeline_reproduces_ground_truth(quiet_exp1):
    streams = generate_streams(quiet_exp1, 0)
    est = run_pipeline(quiet_exp1, streams, detector=DetectorConfig(match_threshold=0.05))
    gt = streams.gt

    # 14 laps of 2220 ticks, one keyframe per 20
    assert est.keyframe_count == 1554
    assert est.graph.nodes[-1].t_us == gt.t_us[-1]
    assert est.graph.loop_edges

    t, poses = est.graph.timestamps(), est.graph.poses_array()
    assert error_series(t, poses, gt.t_us, gt.poses).e.max() < 1e-6

    solved, stats = optimize(est.graph)
    errors = error_series(t, solved.poses_array(), gt.t_us, gt.poses).e
    assert errors.max() < 1e-6
    assert stats.final_chi2 < 1e-9
