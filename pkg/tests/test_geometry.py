"""
Tests for SE(2) geometry and angle wrapping
"""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgebot.core.errors import GeometryError
from edgebot.models.geometry import (
    Pose2,
    between,
    compose,
    information_matrix,
    inverse,
    pose_distance,
    wrap_angle,
)

coords = st.floats(min_value=-100.0, max_value=100.0, allow_nan=False)
headings = st.floats(min_value=-math.pi, max_value=math.pi, allow_nan=False)
poses = st.builds(Pose2, coords, coords, headings)


def assert_pose_close(a: Pose2, b: Pose2, tol: float = 1e-10):
    assert abs(a.x - b.x) <= tol
    assert abs(a.y - b.y) <= tol
    assert abs(wrap_angle(a.theta - b.theta)) <= tol


def test_wrap_angle_examples():
    """Test fixed wrap points, including the +pi boundary"""
    assert wrap_angle(0.0) == 0.0
    assert wrap_angle(3 * math.pi) == math.pi
    assert wrap_angle(math.pi) == math.pi
    assert wrap_angle(-math.pi) == math.pi
    assert wrap_angle(-1.5 * math.pi) == pytest.approx(math.pi / 2, abs=1e-12)


@pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
def test_wrap_angle_rejects_non_finite(bad):
    with pytest.raises(GeometryError):
        wrap_angle(bad)
    # validation errors are ValueErrors too
    with pytest.raises(ValueError):
        wrap_angle(bad)


@settings(max_examples=2000)
@given(st.floats(min_value=-1e4, max_value=1e4, allow_nan=False))
def test_wrap_angle_properties(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert wrap_angle(w) == w
    assert abs(wrap_angle(wrap_angle(a + 2 * math.pi) - w)) < 1e-9
    # congruent to a mod 2pi
    assert abs(math.sin(w) - math.sin(a)) < 1e-9 and abs(math.cos(w) - math.cos(a)) < 1e-9


def test_pose_wraps_heading_and_rejects_non_finite():
    assert Pose2(0, 0, 3 * math.pi).theta == math.pi
    with pytest.raises(GeometryError):
        Pose2(math.nan, 0.0, 0.0)


def test_compose_examples():
    p = Pose2(1.5, -2.0, 0.3)
    assert_pose_close(compose(Pose2.identity(), p), p, 1e-12)
    assert_pose_close(compose(p, inverse(p)), Pose2.identity(), 1e-12)
    assert_pose_close(compose(Pose2(1, 0, math.pi / 2), Pose2(1, 0, 0)), Pose2(1, 1, math.pi / 2), 1e-12)
    assert_pose_close(Pose2(1, 0, math.pi / 2) @ Pose2(1, 0, 0), Pose2(1, 1, math.pi / 2), 1e-12)


def test_inverse_examples():
    assert_pose_close(inverse(Pose2.identity()), Pose2.identity(), 0.0)
    assert_pose_close(inverse(Pose2(1, 0, 0)), Pose2(-1, 0, 0), 1e-12)
    assert_pose_close(inverse(Pose2(1, 2, math.pi / 2)), Pose2(-2, 1, -math.pi / 2), 1e-12)


def test_between_examples():
    p = Pose2(3.0, 4.0, -2.0)
    assert_pose_close(between(p, p), Pose2.identity(), 1e-12)
    assert_pose_close(between(Pose2.identity(), p), p, 1e-12)
    assert_pose_close(between(Pose2(1, 1, math.pi / 2), Pose2(1, 2, math.pi / 2)), Pose2(1, 0, 0), 1e-12)


def _matrix(p: Pose2) -> np.ndarray:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return np.array([[c, -s, p.x], [s, c, p.y], [0, 0, 1]])


@settings(max_examples=500)
@given(poses, poses, poses)
def test_compose_associative(a, b, c):
    assert_pose_close(compose(compose(a, b), c), compose(a, compose(b, c)))


@settings(max_examples=500)
@given(poses, poses)
def test_between_round_trip(a, b):
    assert_pose_close(compose(a, between(a, b)), b)


@settings(max_examples=300)
@given(poses, poses)
def test_compose_matches_homogeneous_matrices(a, b):
    m = _matrix(a) @ _matrix(b)
    c = compose(a, b)
    assert c.x == pytest.approx(m[0, 2], abs=1e-9)
    assert c.y == pytest.approx(m[1, 2], abs=1e-9)
    assert abs(wrap_angle(c.theta - math.atan2(m[1, 0], m[0, 0]))) < 1e-9


def test_group_laws_on_ten_thousand_seeded_poses():
    rng = np.random.default_rng(7)
    xy = rng.uniform(-100.0, 100.0, size=(3, 10_000, 2))
    theta = rng.uniform(-math.pi, math.pi, size=(3, 10_000))
    for k in range(10_000):
        a, b, c = (Pose2(xy[i, k, 0], xy[i, k, 1], theta[i, k]) for i in range(3))
        assert_pose_close(compose(compose(a, b), c), compose(a, compose(b, c)))
        assert_pose_close(compose(a, between(a, b)), b)
        assert_pose_close(inverse(inverse(a)), a)
        assert_pose_close(compose(a, inverse(a)), Pose2.identity())


def test_pose_distance():
    assert pose_distance(Pose2(0, 0, 1.0), Pose2(3, 4, -1.0)) == 5.0


def test_information_matrix_validation():
    """Test diagonal shorthand and rejection of non-positive-definite input"""
    assert np.array_equal(information_matrix([1, 2, 3]), np.diag([1.0, 2.0, 3.0]))
    with pytest.raises(GeometryError):
        information_matrix([1, 0, 3])
    with pytest.raises(GeometryError):
        information_matrix([[1, 2, 0], [0, 1, 0], [0, 0, 1]])
    with pytest.raises(GeometryError):
        information_matrix(np.eye(2))
