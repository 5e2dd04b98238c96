"""
Robust pose-graph solver: DCS kernel, toy graphs against a dense oracle,
gauge and monotonicity guarantees
"""
import math

import numpy as np
import pytest

from edgebot.core.errors import SolverDiverged
from edgebot.models.geometry import Pose2, between, compose
from edgebot.models.schemas import SolverConfig
from edgebot.services import optimizer
from edgebot.services.estimator import Estimator
from edgebot.services.optimizer import dcs_weight, optimize, robust_cost
from edgebot.services.pose_graph import LoopEdge, OdomEdge, PoseGraph

TOY_INFO = np.diag([12.0, 12.0, 100.0])
STEP = (5.0, 0.0, 2 * math.pi / 3)


# ---------------------------------------------------------------------------
# Kernel
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("chi2, phi, expected", [(0.0, 1.0, 1.0), (1.0, 1.0, 1.0), (3.0, 1.0, 0.5), (2.0, 2.0, 1.0)])
def test_dcs_weight_examples(chi2, phi, expected):
    assert dcs_weight(chi2, phi) == pytest.approx(expected)


def test_dcs_weight_rejects_bad_input():
    with pytest.raises(ValueError):
        dcs_weight(-1.0, 1.0)
    with pytest.raises(ValueError):
        dcs_weight(1.0, 0.0)


def test_robust_cost_derivative_is_squared_weight():
    phi = 1.5
    for chi2 in (0.2, 1.5, 4.0, 50.0):
        h = 1e-6
        slope = (robust_cost(chi2 + h, phi) - robust_cost(chi2 - h, phi)) / (2 * h)
        assert slope == pytest.approx(dcs_weight(chi2, phi) ** 2, rel=1e-5)
    # continuous at the knee, bounded above by 3 phi
    assert robust_cost(phi, phi) == pytest.approx(phi)
    assert robust_cost(1e12, phi) < 3 * phi


# ---------------------------------------------------------------------------
# Toy graphs
# ---------------------------------------------------------------------------

def toy_graph(false_loop: bool = False, phi: float = 1.0) -> PoseGraph:
    """Triangle walked once: three odometry edges, one slightly wrong, and the closing loop"""
    deltas = [Pose2(*STEP), Pose2(5.1, 0.0, STEP[2] + 0.02), Pose2(*STEP)]
    graph = PoseGraph()
    pose = Pose2.identity()
    graph.add_node(pose)
    for k, delta in enumerate(deltas):
        pose = compose(pose, delta)
        graph.add_node(pose)
        graph.add_odom_edge(OdomEdge(k, k + 1, delta, TOY_INFO))
    graph.add_loop_edge(LoopEdge(0, 3, sigma_lc=0.5, phi=phi))
    if false_loop:
        # nodes 1 and 2 are 5 m apart
        graph.add_loop_edge(LoopEdge(1, 2, sigma_lc=0.5, phi=phi))
    return graph


def stacked_residual(graph: PoseGraph, x: np.ndarray) -> np.ndarray:
    """Whitened residual vector of the whole graph at free poses x (node 0 fixed)"""
    poses = np.vstack([graph.nodes[0].pose.as_array(), x.reshape(-1, 3)])
    out = []
    for e in graph.odom_edges:
        err = between(e.delta, between(Pose2.from_array(poses[e.i]), Pose2.from_array(poses[e.j])))
        out.extend(np.sqrt(np.diag(e.info)) * err.as_array())
    for e in graph.loop_edges:
        out.extend((poses[e.j, :2] - poses[e.i, :2]) / e.sigma_lc)
    return np.array(out)


def dense_oracle(graph: PoseGraph, iterations: int = 50) -> np.ndarray:
    """Plain Gauss-Newton with numeric Jacobians and a dense solve"""
    x = graph.poses_array()[1:].reshape(-1)
    h = 1e-7
    for _ in range(iterations):
        r = stacked_residual(graph, x)
        J = np.zeros((r.size, x.size))
        for k in range(x.size):
            step = np.zeros(x.size)
            step[k] = h
            J[:, k] = (stacked_residual(graph, x + step) - stacked_residual(graph, x - step)) / (2 * h)
        dx = np.linalg.lstsq(J, -r, rcond=None)[0]
        x = x + dx
        if np.linalg.norm(dx) < 1e-13:
            break
    return np.vstack([graph.nodes[0].pose.as_array(), x.reshape(-1, 3)])


def test_toy_matches_dense_oracle():
    graph = toy_graph()
    expected = dense_oracle(graph)
    solved, stats = optimize(graph, SolverConfig(robust=False, rel_tol=1e-14))
    assert solved.poses_array()[:, :2] == pytest.approx(expected[:, :2], abs=1e-6)
    assert np.cos(solved.poses_array()[:, 2] - expected[:, 2]) == pytest.approx(np.ones(4), abs=1e-12)
    assert stats.final_chi2 < stats.initial_chi2
    assert stats.converged


def test_sparse_and_dense_paths_agree():
    graph = toy_graph(false_loop=True)
    dense, _ = optimize(graph, SolverConfig(dense_threshold=300))
    sparse, _ = optimize(graph, SolverConfig(dense_threshold=1))
    assert sparse.poses_array() == pytest.approx(dense.poses_array(), abs=1e-8)


def separation(poses: np.ndarray) -> float:
    return float(np.hypot(*(poses[2, :2] - poses[1, :2])))


def test_false_loop_is_down_weighted():
    reference = dense_oracle(toy_graph())
    solved, stats = optimize(toy_graph(false_loop=True), SolverConfig(robust=True))
    poses = solved.poses_array()

    assert solved.loop_edges[1].weight < 0.1
    assert stats.weights[1] < 0.1
    assert stats.weights[0] == pytest.approx(1.0)
    assert abs(separation(poses) - separation(reference)) < 1e-3
    assert np.abs(poses[:, :2] - reference[:, :2]).max() < 1e-3


def test_traditional_solver_is_pulled_by_false_loop():
    reference = dense_oracle(toy_graph())
    solved, stats = optimize(toy_graph(false_loop=True), SolverConfig(robust=False))
    poses = solved.poses_array()

    assert stats.weights == [1.0, 1.0]
    assert separation(reference) - separation(poses) > 0.5
    assert np.abs(poses[:, :2] - reference[:, :2]).max() > 0.3


def test_annealed_solver_also_rejects_false_loop():
    solved, stats = optimize(toy_graph(false_loop=True), SolverConfig(gnc_phi_start=1000.0))
    assert stats.weights[1] < 0.1
    assert stats.final_chi2 <= stats.initial_chi2


# ---------------------------------------------------------------------------
# Guarantees
# ---------------------------------------------------------------------------

def test_consistent_graph_is_left_alone():
    graph = PoseGraph()
    pose = Pose2(1.0, 1.0, 0.0)
    graph.add_node(pose)
    for k in range(10):
        delta = Pose2(0.2, 0.0, 0.1)
        pose = compose(pose, delta)
        graph.add_node(pose)
        graph.add_odom_edge(OdomEdge(k, k + 1, delta, TOY_INFO))
    solved, stats = optimize(graph)
    assert solved.poses_array() == pytest.approx(graph.poses_array(), abs=1e-9)
    assert stats.final_chi2 == pytest.approx(0.0, abs=1e-12)


def test_anchor_is_bit_identical_and_history_monotone():
    graph = toy_graph(false_loop=True)
    graph.nodes[0].pose = Pose2(0.3, -0.2, 0.1)
    for node in graph.nodes[1:]:
        node.pose = Pose2(node.pose.x + 0.4, node.pose.y - 0.3, node.pose.theta + 0.05)
    for cfg in (SolverConfig(), SolverConfig(robust=False), SolverConfig(gnc_phi_start=100.0)):
        solved, stats = optimize(graph, cfg)
        assert solved.nodes[0].pose == graph.nodes[0].pose
        history = stats.chi2_history
        assert all(b <= a for a, b in zip(history, history[1:]))
        assert all(0.0 < w <= 1.0 for w in stats.weights)


def test_input_graph_is_not_modified():
    graph = toy_graph(false_loop=True)
    before = graph.poses_array().copy()
    optimize(graph)
    assert np.array_equal(graph.poses_array(), before)
    assert [e.weight for e in graph.loop_edges] == [1.0, 1.0]


def test_single_node_graph():
    graph = PoseGraph()
    graph.add_node(Pose2(1.0, 2.0, 0.0))
    solved, stats = optimize(graph)
    assert stats.iterations == 0
    assert solved.nodes[0].pose == graph.nodes[0].pose


def test_singular_system_raises_with_stats(monkeypatch):
    monkeypatch.setattr(optimizer, "_solve_damped", lambda *args: None)
    with pytest.raises(SolverDiverged) as info:
        optimize(toy_graph(), SolverConfig(robust=False))
    assert info.value.stats is not None
    assert info.value.stats.converged is False
    assert info.value.stats.final_lambda > 1e8


def test_merge_rebases_nodes_added_during_solve():
    est = Estimator(n_aps=1)
    for k in range(1, 5):
        est.add_odometry(k * 200_000, 1.0, 0.0, 200_000)
        est.make_keyframe(k * 200_000)
    snapshot = est.graph.copy()
    snapshot.nodes[3].pose = Pose2(3.0, 0.5, 0.0)

    est.add_odometry(1_000_000, 1.0, 0.0, 200_000)
    est.make_keyframe(1_000_000)
    est.merge(snapshot, optimize(snapshot)[1])

    assert est.graph.nodes[3].pose == Pose2(3.0, 0.5, 0.0)
    assert est.graph.nodes[4].pose.as_array() == pytest.approx([4.0, 0.5, 0.0])


# ---------------------------------------------------------------------------
# Annealed vs direct solutions
# ---------------------------------------------------------------------------

def straight_chain(n: int = 11) -> PoseGraph:
    graph = PoseGraph()
    graph.add_node(Pose2.identity())
    for k in range(n - 1):
        graph.add_node(Pose2(k + 1.0, 0.0, 0.0))
        graph.add_odom_edge(OdomEdge(k, k + 1, Pose2(1.0, 0.0, 0.0), np.diag([100.0, 100.0, 100.0])))
    return graph


def test_bent_annealed_solution_loses_to_direct_one():
    graph = straight_chain()
    problem = optimizer._Problem(graph, robust=True)
    direct = graph.poses_array()
    bent = direct.copy()
    bent[5:, 1] += 1.0  # one edge stretched sideways by 1 m: chi2 100, mean 10 per edge

    assert not optimizer._prefer_annealed(problem, (bent, 5.0), (direct, 50.0), gate=9.0)
    # with the gate out of the way the lower cost wins
    assert optimizer._prefer_annealed(problem, (bent, 5.0), (direct, 50.0), gate=1e3)


def test_consistent_solutions_compare_by_cost():
    graph = straight_chain()
    problem = optimizer._Problem(graph, robust=True)
    poses = graph.poses_array()
    assert optimizer._prefer_annealed(problem, (poses, 2.0), (poses, 3.0), gate=9.0)
    assert not optimizer._prefer_annealed(problem, (poses, 3.0), (poses, 2.0), gate=9.0)


def test_annealed_result_never_costs_more_than_direct():
    graph = toy_graph(false_loop=True)
    _, direct = optimize(graph, SolverConfig())
    _, annealed = optimize(graph, SolverConfig(gnc_phi_start=1000.0, gnc_steps=3, gnc_stage_iters=2))
    assert annealed.final_chi2 <= direct.final_chi2 + 1e-12
    assert annealed.iterations > direct.iterations


# ---------------------------------------------------------------------------
# Damping and sparse factorization on a larger graph
# ---------------------------------------------------------------------------

def drifted_laps(laps: int = 4, per_lap: int = 60, bias: float = 0.004):
    """Circle of radius 3 m walked `laps` times with a heading bias on every odometry edge"""
    angles = 2 * math.pi * np.arange(laps * per_lap + 1) / per_lap
    truth = [Pose2(3 * math.cos(a), 3 * math.sin(a), a + math.pi / 2) for a in angles]
    graph = PoseGraph()
    pose = truth[0]
    graph.add_node(pose)
    for k in range(len(truth) - 1):
        true_delta = between(truth[k], truth[k + 1])
        delta = Pose2(true_delta.x, true_delta.y, true_delta.theta + bias)
        pose = compose(pose, delta)
        graph.add_node(pose)
        graph.add_odom_edge(OdomEdge(k, k + 1, delta, np.diag([1e4, 1e4, 1e4])))
    for k in range(0, len(truth) - per_lap, 3):
        graph.add_loop_edge(LoopEdge(k, k + per_lap, sigma_lc=0.5))
    return graph, np.array([[p.x, p.y] for p in truth])


def position_rmse(poses: np.ndarray, truth_xy: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.sum((poses[:, :2] - truth_xy) ** 2, axis=1))))


def test_sparse_solver_converges_quickly_on_drifted_laps():
    graph, truth_xy = drifted_laps()
    solved, stats = optimize(graph, SolverConfig(robust=False, rel_tol=1e-6, max_iters=30, dense_threshold=1))
    assert stats.converged
    assert stats.iterations <= 25
    assert stats.final_chi2 < stats.initial_chi2
    assert position_rmse(solved.poses_array(), truth_xy) < position_rmse(graph.poses_array(), truth_xy)
    history = stats.chi2_history
    assert all(b <= a for a, b in zip(history, history[1:]))


def test_linearize_reuses_one_sparsity_pattern():
    graph, _ = drifted_laps(laps=2, per_lap=30)
    problem = optimizer._Problem(graph, robust=True)
    H0, b0 = problem.linearize(graph.poses_array())
    H1, b1 = problem.linearize(graph.poses_array() + 0.05)
    assert np.array_equal(H0.indptr, H1.indptr)
    assert np.array_equal(H0.indices, H1.indices)
    assert H0.shape == (3 * (len(graph) - 1),) * 2
    # symmetric normal equations
    assert abs(H1 - H1.T).max() < 1e-9
    assert b0.shape == (3 * (len(graph) - 1),)
