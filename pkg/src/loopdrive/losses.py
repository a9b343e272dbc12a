"""Differentiable per-step training costs.

The step cost is the L1 pose-imitation term plus two optional auxiliary
terms: the magnitude of the planar acceleration (weight ``alpha``) and a
circle-decomposition collision overlap against nearby vehicles (weight
``beta``). Everything here operates on engine Vars so gradients reach both
the state and the action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine

XY_MASK = np.array([1.0, 1.0, 0.0])
NORM_EPS = 1e-24  # smooths the norm kink at exactly zero acceleration


@dataclass
class CostWeights:
    alpha: float = 0.0  # weight on |acceleration|
    beta: float = 0.0   # weight on collision overlap
    gamma: float = 0.8  # per-step discount

    def validate(self) -> None:
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("alpha and beta must be non-negative")


def imitation_l1(tape, expert_pose, policy_pose):
    """|dx| + |dy| + |wrapped dyaw| between two poses."""
    return engine.l1_wrapped(tape, policy_pose, expert_pose)


def accel_magnitude(tape, p_prev, p_cur, p_next, dt: float):
    """Norm of the second finite difference of planar position over dt^2."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    d1 = engine.sub(tape, p_next, p_cur)
    d2 = engine.sub(tape, p_cur, p_prev)
    dd = engine.mul(tape, engine.sub(tape, d1, d2), XY_MASK)
    sq = engine.sum_all(tape, engine.mul(tape, dd, dd))
    norm = engine.sqrt(tape, engine.add(tape, sq, np.asarray(NORM_EPS)))
    return engine.scale(tape, norm, 1.0 / (dt * dt))


def circle_decomposition(extent) -> tuple[np.ndarray, float]:
    """Three-circle cover of a length x width rectangle.

    Centers sit at longitudinal offsets {-L/3, 0, +L/3}; the shared radius
    hypot(L/6, W/2) is the smallest that covers the rectangle with this
    spacing.
    """
    length, width = float(extent[0]), float(extent[1])
    if length <= 0.0 or width <= 0.0:
        raise ValueError(f"extent must be positive, got {extent}")
    offsets = np.array([[-length / 3.0, 0.0], [0.0, 0.0], [length / 3.0, 0.0]])
    return offsets, math.hypot(length / 6.0, width / 2.0)


def _agent_circles(agent_poses: np.ndarray, agent_extents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = agent_poses.shape[0]
    centers = np.zeros((m, 3, 2))
    radii = np.zeros(m)
    for i in range(m):
        offsets, r = circle_decomposition(agent_extents[i])
        c, s = math.cos(agent_poses[i, 2]), math.sin(agent_poses[i, 2])
        centers[i, :, 0] = agent_poses[i, 0] + c * offsets[:, 0] - s * offsets[:, 1]
        centers[i, :, 1] = agent_poses[i, 1] + s * offsets[:, 0] + c * offsets[:, 1]
        radii[i] = r
    return centers, radii


def collision_cost(tape, sdv_pose, sdv_extent, agent_poses, agent_extents):
    """Sum over agents of the worst circle-pair overlap with the SDV.

    Per-agent values live in [0, 1]: 1 at coincident centers, 0 from contact
    distance outwards.
    """
    agent_poses = np.asarray(agent_poses, dtype=np.float64)
    agent_extents = np.asarray(agent_extents, dtype=np.float64)
    if agent_poses.shape[0] == 0:
        return _zero_scalar(tape)
    offsets, r_sdv = circle_decomposition(sdv_extent)
    sdv_centers = engine.body_to_world(tape, sdv_pose, offsets)
    agent_centers, agent_r = _agent_circles(agent_poses, agent_extents)
    rsum = np.broadcast_to((r_sdv + agent_r)[:, None, None],
                           (agent_poses.shape[0], 3, 3)).copy()
    per_agent = engine.circle_overlap_cost(tape, sdv_centers, agent_centers, rsum)
    return engine.sum_all(tape, per_agent)


def _zero_scalar(tape):
    return engine.leaf(tape, np.asarray(0.0)) if tape is not None else np.asarray(0.0)


def step_cost(tape, expert_pose, p_prev, p_cur, p_next, sdv_extent,
              agent_poses, agent_extents, weights: CostWeights, dt: float):
    """Mixed per-step cost at the pose reached by the action.

    Returns (total Var, components dict of floats).
    """
    imit = imitation_l1(tape, expert_pose, p_next)
    total = imit
    parts = {"imitation": float(engine.value_of(imit))}
    if weights.alpha > 0.0:
        acc = accel_magnitude(tape, p_prev, p_cur, p_next, dt)
        total = engine.add(tape, total, engine.scale(tape, acc, weights.alpha))
        parts["accel"] = float(engine.value_of(acc))
    else:
        parts["accel"] = 0.0
    if weights.beta > 0.0:
        coll = collision_cost(tape, p_next, sdv_extent, agent_poses, agent_extents)
        total = engine.add(tape, total, engine.scale(tape, coll, weights.beta))
        parts["collision"] = float(engine.value_of(coll))
    else:
        parts["collision"] = 0.0
    parts["total"] = float(engine.value_of(total))
    return total, parts
