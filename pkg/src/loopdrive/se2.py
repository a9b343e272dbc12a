"""Planar rigid-body poses and their analytic Jacobians.

A pose is a plain float64 array ``[x, y, yaw]`` with yaw in radians. The
convention is active: ``compose(a, b)`` returns the pose of frame ``b``
expressed in ``a``'s parent frame, i.e. the homogeneous product

    T(a) @ T(b),   T(p) = [[cos, -sin, x], [sin, cos, y], [0, 0, 1]].

Every operation wraps yaw back into (-pi, pi]. All functions are pure and
allocate fresh arrays; inputs are never mutated.
"""

from __future__ import annotations

import math

import numpy as np

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    return math.pi - (math.pi - a) % TWO_PI


def wrap_angles(a: np.ndarray) -> np.ndarray:
    """Vectorized wrap into (-pi, pi]."""
    return math.pi - np.mod(math.pi - np.asarray(a, dtype=np.float64), TWO_PI)


def identity() -> np.ndarray:
    return np.zeros(3, dtype=np.float64)


def pose(x: float, y: float, yaw: float) -> np.ndarray:
    return np.array([x, y, wrap_angle(yaw)], dtype=np.float64)


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Group product: pose of b in a's parent frame."""
    c, s = math.cos(a[2]), math.sin(a[2])
    return np.array(
        [
            a[0] + c * b[0] - s * b[1],
            a[1] + s * b[0] + c * b[1],
            wrap_angle(a[2] + b[2]),
        ],
        dtype=np.float64,
    )


def inverse(p: np.ndarray) -> np.ndarray:
    """Group inverse: compose(p, inverse(p)) == identity."""
    c, s = math.cos(p[2]), math.sin(p[2])
    return np.array(
        [
            -(c * p[0] + s * p[1]),
            s * p[0] - c * p[1],
            wrap_angle(-p[2]),
        ],
        dtype=np.float64,
    )


def relative(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pose of b expressed in frame a: inverse(a) . b."""
    c, s = math.cos(a[2]), math.sin(a[2])
    dx, dy = b[0] - a[0], b[1] - a[1]
    return np.array(
        [
            c * dx + s * dy,
            -s * dx + c * dy,
            wrap_angle(b[2] - a[2]),
        ],
        dtype=np.float64,
    )


def compose_jacobians(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of compose(a, b) w.r.t. a and b (two 3x3 arrays).

    The yaw wrap is a constant shift, so its derivative is 1 everywhere off
    the cut.
    """
    c, s = math.cos(a[2]), math.sin(a[2])
    ja = np.array(
        [
            [1.0, 0.0, -s * b[0] - c * b[1]],
            [0.0, 1.0, c * b[0] - s * b[1]],
            [0.0, 0.0, 1.0],
        ],
        dtype=np.float64,
    )
    jb = np.array(
        [
            [c, -s, 0.0],
            [s, c, 0.0],
            [0.0, 0.0, 1.0],
        ],
        dtype=np.float64,
    )
    return ja, jb


def relative_jacobians(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Partial derivatives of relative(a, b) w.r.t. a and b."""
    c, s = math.cos(a[2]), math.sin(a[2])
    dx, dy = b[0] - a[0], b[1] - a[1]
    rx = c * dx + s * dy
    ry = -s * dx + c * dy
    ja = np.array(
        [
            [-c, -s, ry],
            [s, -c, -rx],
            [0.0, 0.0, -1.0],
        ],
        dtype=np.float64,
    )
    jb = np.array(
        [
            [c, s, 0.0],
            [-s, c, 0.0],
            [0.0, 0.0, 1.0],
        ],
        dtype=np.float64,
    )
    return ja, jb


def l1_pose_distance(a: np.ndarray, b: np.ndarray) -> float:
    """L1 distance on pose 3-vectors with the shortest signed yaw difference."""
    return abs(a[0] - b[0]) + abs(a[1] - b[1]) + abs(wrap_angle(a[2] - b[2]))
