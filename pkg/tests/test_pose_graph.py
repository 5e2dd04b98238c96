"""
Pose graph structure, residual Jacobians and the text dump format
"""
import numpy as np
import pytest

from edgebot.core.errors import GeometryError
from edgebot.models.geometry import Pose2, compose
from edgebot.services.pose_graph import (
    LoopEdge,
    OdomEdge,
    PoseGraph,
    dump_graph,
    load_graph,
    loop_terms,
    odom_terms,
    residual_loop,
    residual_odom,
)

INFO = np.diag([50.0, 50.0, 200.0])


def numeric_jacobians(fn, x_i: Pose2, x_j: Pose2, h: float = 1e-6):
    """Central differences of fn(x_i, x_j) w.r.t. each pose coordinate"""
    a, b = x_i.as_array(), x_j.as_array()
    m = fn(x_i, x_j).shape[0]
    J_i, J_j = np.zeros((m, 3)), np.zeros((m, 3))
    for k in range(3):
        step = np.zeros(3)
        step[k] = h
        J_i[:, k] = (fn(Pose2.from_array(a + step), x_j) - fn(Pose2.from_array(a - step), x_j)) / (2 * h)
        J_j[:, k] = (fn(x_i, Pose2.from_array(b + step)) - fn(x_i, Pose2.from_array(b - step))) / (2 * h)
    return J_i, J_j


def rel_err(numeric, analytic):
    return np.linalg.norm(numeric - analytic) / max(np.linalg.norm(analytic), 1.0)


def random_odom_case(rng):
    x_i = Pose2(*rng.uniform(-5, 5, 2), rng.uniform(-3, 3))
    delta = Pose2(*rng.uniform(-1, 1, 2), rng.uniform(-1, 1))
    noise = Pose2(*rng.normal(0, 0.1, 2), rng.normal(0, 0.1))
    x_j = compose(compose(x_i, delta), noise)
    return OdomEdge(0, 1, delta, INFO), x_i, x_j


def test_odom_residual_zero_on_consistent_poses():
    x_i = Pose2(1.0, 2.0, 0.4)
    delta = Pose2(0.5, -0.2, 0.3)
    r, _, _ = residual_odom(OdomEdge(0, 1, delta, INFO), x_i, compose(x_i, delta))
    assert r == pytest.approx(np.zeros(3), abs=1e-12)


def test_odom_residual_grows_linearly_with_translation():
    x_i = Pose2(0.0, 0.0, 0.3)
    delta = Pose2(1.0, 0.0, 0.0)
    x_j = compose(x_i, delta)
    edge = OdomEdge(0, 1, delta, INFO)
    norms = [
        np.linalg.norm(residual_odom(edge, x_i, Pose2(x_j.x + eps, x_j.y, x_j.theta))[0])
        for eps in (1e-4, 2e-4, 4e-4)
    ]
    assert norms[1] == pytest.approx(2 * norms[0], rel=1e-6)
    assert norms[2] == pytest.approx(4 * norms[0], rel=1e-6)


def test_odom_jacobians_match_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(100):
        edge, x_i, x_j = random_odom_case(rng)
        _, J_i, J_j = residual_odom(edge, x_i, x_j)
        N_i, N_j = numeric_jacobians(lambda a, b: residual_odom(edge, a, b)[0], x_i, x_j)
        assert rel_err(N_i, J_i) < 1e-5
        assert rel_err(N_j, J_j) < 1e-5


def test_vectorized_odom_terms_match_single_edges():
    rng = np.random.default_rng(5)
    graph = PoseGraph()
    pose = Pose2.identity()
    graph.add_node(pose)
    for k in range(20):
        delta = Pose2(*rng.uniform(-1, 1, 2), rng.uniform(-1, 1))
        pose = compose(compose(pose, delta), Pose2(*rng.normal(0, 0.05, 3)))
        graph.add_node(pose)
        graph.add_odom_edge(OdomEdge(k, k + 1, delta, INFO))

    poses = graph.poses_array()
    _, _, r, J_i, J_j, info = odom_terms(poses, graph.odom_edges)
    for m, edge in enumerate(graph.odom_edges):
        r1, Ji1, Jj1 = residual_odom(edge, graph.nodes[edge.i].pose, graph.nodes[edge.j].pose)
        assert r[m] == pytest.approx(r1, abs=1e-9)
        assert J_i[m] == pytest.approx(Ji1, abs=1e-9)
        assert J_j[m] == pytest.approx(Jj1, abs=1e-9)
        assert info[m] == pytest.approx(INFO)


def test_loop_residual_examples():
    edge = LoopEdge(0, 60, sigma_lc=0.5)
    r, _, _ = residual_loop(edge, Pose2(1.0, 1.0, 0.2), Pose2(1.0, 1.0, -2.0))
    assert r == pytest.approx([0.0, 0.0])
    r, _, _ = residual_loop(edge, Pose2(0.0, 0.0, 0.0), Pose2(0.5, 0.0, 1.0))
    assert r == pytest.approx([1.0, 0.0])


def test_loop_jacobians_match_finite_differences():
    rng = np.random.default_rng(12)
    for _ in range(100):
        edge = LoopEdge(0, 1, sigma_lc=rng.uniform(0.2, 2.0))
        x_i = Pose2(*rng.uniform(-5, 5, 2), rng.uniform(-3, 3))
        x_j = Pose2(*rng.uniform(-5, 5, 2), rng.uniform(-3, 3))
        _, J_i, J_j = residual_loop(edge, x_i, x_j)
        N_i, N_j = numeric_jacobians(lambda a, b: residual_loop(edge, a, b)[0], x_i, x_j)
        assert rel_err(N_i, J_i) < 1e-5
        assert rel_err(N_j, J_j) < 1e-5
        assert np.all(J_i[:, 2] == 0.0)


def test_vectorized_loop_terms():
    poses = np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 1.0], [1.0, 1.0, 0.0]])
    edges = [LoopEdge(0, 1, sigma_lc=0.5), LoopEdge(0, 2, sigma_lc=2.0)]
    I, J, r, inv_sigma = loop_terms(poses, edges)
    assert I.tolist() == [0, 0]
    assert J.tolist() == [1, 2]
    assert r == pytest.approx(np.array([[6.0, 8.0], [0.5, 0.5]]))
    assert inv_sigma == pytest.approx([2.0, 0.5])


# ---------------------------------------------------------------------------
# Structure
# ---------------------------------------------------------------------------

def chain(n=4):
    graph = PoseGraph()
    for k in range(n):
        graph.add_node(Pose2(float(k), 0.0, 0.0), t_us=200_000 * (k + 1))
    for k in range(n - 1):
        graph.add_odom_edge(OdomEdge(k, k + 1, Pose2(1.0, 0.0, 0.0), INFO))
    return graph


def test_edge_validation():
    with pytest.raises(GeometryError):
        OdomEdge(0, 2, Pose2.identity(), INFO)
    with pytest.raises(GeometryError):
        OdomEdge(0, 1, Pose2.identity(), np.diag([1.0, -1.0, 1.0]))
    with pytest.raises(GeometryError):
        LoopEdge(5, 5)
    with pytest.raises(GeometryError):
        LoopEdge(1, 3, sigma_lc=0.0)


def test_graph_validation():
    graph = chain(3)
    with pytest.raises(GeometryError):
        graph.add_loop_edge(LoopEdge(0, 3))
    with pytest.raises(GeometryError):
        graph.add_odom_edge(OdomEdge(1, 2, Pose2.identity(), INFO))
    graph.add_node(Pose2(9.0, 0.0, 0.0))
    with pytest.raises(GeometryError):
        graph.check_connected()


def test_copy_is_independent():
    graph = chain()
    graph.add_loop_edge(LoopEdge(0, 3))
    dup = graph.copy()
    dup.nodes[1].pose = Pose2(7.0, 7.0, 0.0)
    dup.loop_edges[0].weight = 0.25
    dup.odom_edges[0].info[0, 0] = 1.0
    assert graph.nodes[1].pose == Pose2(1.0, 0.0, 0.0)
    assert graph.loop_edges[0].weight == 1.0
    assert graph.odom_edges[0].info[0, 0] == 50.0
    assert dup.timestamps().tolist() == graph.timestamps().tolist()


def test_dump_and_load():
    graph = chain()
    graph.add_loop_edge(LoopEdge(0, 3, sigma_lc=0.5, phi=2.0))
    text = dump_graph(graph)
    assert text.splitlines()[0] == "NODE 0 0.0 0.0 0.0"
    assert sum(line.startswith("EDGE_ODOM") for line in text.splitlines()) == 3
    assert "EDGE_LOOP 0 3 0.5 2.0" in text

    loaded = load_graph("# comment\n\n" + text)
    assert loaded.poses_array() == pytest.approx(graph.poses_array())
    assert [(e.i, e.j) for e in loaded.odom_edges] == [(0, 1), (1, 2), (2, 3)]
    assert loaded.odom_edges[1].info == pytest.approx(INFO)
    assert loaded.loop_edges[0].phi == 2.0
    assert loaded.loop_edges[0].source == "file"


@pytest.mark.parametrize(
    "text",
    [
        "NODE 0 0 0\n",
        "VERTEX 0 0 0 0\n",
        "NODE 0 0 0 zero\n",
        "NODE 1 0 0 0\n",
        "NODE 0 0 0 0\nNODE 1 1 0 0\nEDGE_LOOP 1 0 0.5 1\n",
    ],
)
def test_load_rejects_malformed(text):
    with pytest.raises(ValueError):
        load_graph(text)
