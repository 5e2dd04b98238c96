"""
Planar rigid-body geometry (SE(2)), angle arithmetic and session time

Pose2 values are immutable and always carry a wrapped heading, so they can be
shared freely between the robot, edge and evaluation tasks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from edgebot.core.errors import GeometryError

TWO_PI = 2.0 * math.pi

# Microseconds since session start
Timestamp = int

MICROS_PER_SECOND = 1_000_000


def wrap_angle(a: float) -> float:
    """
    Wrap an angle to (-pi, pi]

    Values already inside the interval are returned untouched, which makes the
    operation exactly idempotent.

    Raises:
        GeometryError: if `a` is not finite
    """
    if not math.isfinite(a):
        raise GeometryError(f"angle must be finite, got {a!r}")
    if -math.pi < a <= math.pi:
        return float(a)
    r = math.fmod(a + math.pi, TWO_PI)
    if r <= 0.0:
        r += TWO_PI
    wrapped = r - math.pi
    # fmod rounding can land a hair outside the interval
    if wrapped <= -math.pi:
        return math.pi
    return min(wrapped, math.pi)


@dataclass(frozen=True, slots=True)
class Pose2:
    """SE(2) pose: position in meters, heading in radians wrapped to (-pi, pi]"""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"pose position must be finite, got ({self.x}, {self.y})")
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, v: Iterable[float]) -> "Pose2":
        x, y, theta = v
        return cls(float(x), float(y), float(theta))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=float)

    def position(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return compose(self, other)


def compose(a: Pose2, b: Pose2) -> Pose2:
    """a ⊕ b: rotate b's translation by a.theta, add a's translation, sum headings"""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose2(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def inverse(p: Pose2) -> Pose2:
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose2(
        -c * p.x - s * p.y,
        s * p.x - c * p.y,
        -p.theta,
    )


def between(a: Pose2, b: Pose2) -> Pose2:
    """Relative pose of b seen from a, i.e. inverse(a) ⊕ b"""
    c, s = math.cos(a.theta), math.sin(a.theta)
    dx, dy = b.x - a.x, b.y - a.y
    return Pose2(c * dx + s * dy, -s * dx + c * dy, b.theta - a.theta)


def pose_distance(a: Pose2, b: Pose2) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def information_matrix(values) -> np.ndarray:
    """
    Validate a 3x3 information matrix on (x, y, theta)

    Accepts either three diagonal entries or a full 3x3 array; the result must be
    symmetric positive definite.
    """
    m = np.asarray(values, dtype=float)
    if m.shape == (3,):
        m = np.diag(m)
    if m.shape != (3, 3):
        raise GeometryError(f"information matrix must be 3x3, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise GeometryError("information matrix must be finite")
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * max(1.0, float(np.abs(m).max()))):
        raise GeometryError("information matrix must be symmetric")
    try:
        np.linalg.cholesky(m)
    except np.linalg.LinAlgError as e:
        raise GeometryError("information matrix must be positive definite") from e
    return m
